import io
import socket
import threading
from concurrent.futures import ThreadPoolExecutor

import pytest

from authstore import client
from authstore.client import AuthenticationFailed, Connection, ServerError, make_credentials
from authstore.group import TEST_256
from authstore.messages import AuthRequest, ErrorCode, GetBlob, Register
from authstore.server import BlobStore, RateLimiter, VersionConflict
from authstore.stretch import KdfParams
from authstore.wire import decode, encode, read_frame

KDF = KdfParams.test_iterated(5)


def reg(srv, name="alice", pw="pw"):
    return client.register(srv.address, TEST_256, name, pw, KDF, cache=None)


def test_register_login_and_blob_round_trip(server):
    reg(server)
    with client.login(server.address, TEST_256, "alice", "pw", cache=None) as conn:
        assert conn.get_blob() == (0, b"")
        conn.put_blob(1, b"hello")
        with pytest.raises(ServerError) as err:
            conn.put_blob(1, b"again")
        assert err.value.code == ErrorCode.VERSION_CONFLICT
        assert conn.get_blob() == (1, b"hello")
    with client.login(server.address, TEST_256, "ALICE", "pw", cache=None) as conn:
        assert conn.get_blob() == (1, b"hello")


def test_duplicate_registration(server):
    reg(server)
    with pytest.raises(ServerError) as err:
        reg(server)
    assert err.value.code == ErrorCode.USER_EXISTS


def test_bad_registration_inputs(server):
    p_pi, h, _ = make_credentials(TEST_256, "pw", KDF, cache=None)
    with Connection(server.address, TEST_256) as conn:
        with pytest.raises(ServerError) as err:
            conn.register("bad\nname", p_pi, h)
        assert err.value.code == ErrorCode.INVALID_USERNAME
        conn.send(Register("bob", p_pi, bytes(32)))
        assert decode(read_frame(conn.sock)).code == ErrorCode.INVALID_VERIFIER


def test_wrong_password_closes_after_three_frames(server):
    reg(server)
    conn = Connection(server.address, TEST_256)
    with pytest.raises(AuthenticationFailed):
        conn.authenticate("alice", "nope", cache=None)
    assert [d for d, _ in conn.transcript] == ["send", "recv", "send"]
    conn.close()


def test_unknown_user_looks_like_wrong_password(server):
    reg(server)
    lengths = {}
    for name in ("alice", "mallory"):
        conn = Connection(server.address, TEST_256)
        with pytest.raises(AuthenticationFailed):
            conn.authenticate(name, "nope", cache=None)
        m2 = decode(conn.transcript[1][1])
        lengths[name] = (len(conn.transcript[1][1]), m2.p_pi.base.algorithm, m2.p_pi.base.time_cost)
        conn.close()
    assert lengths["alice"][:2] == lengths["mallory"][:2]


def test_decoy_parameters_are_stable(server):
    seen = []
    for _ in range(2):
        with Connection(server.address, TEST_256) as conn:
            conn.send(AuthRequest("ghost"))
            seen.append(decode(read_frame(conn.sock)).p_pi)
    assert seen[0] == seen[1]


def test_rate_limit_on_sixth_attempt(server):
    reg(server)
    for _ in range(5):
        with pytest.raises(AuthenticationFailed):
            client.login(server.address, TEST_256, "alice", "bad", cache=None)
    with pytest.raises(ServerError) as err:
        client.login(server.address, TEST_256, "alice", "pw", cache=None)
    assert err.value.code == ErrorCode.RATE_LIMITED


def test_rate_limiter_window():
    now = [0.0]
    lim = RateLimiter(3, 60, clock=lambda: now[0])
    for _ in range(3):
        lim.record_failure("a")
    assert lim.blocked("a") and not lim.blocked("b")
    now[0] = 61
    assert not lim.blocked("a")


def test_blob_store_versions(tmp_path):
    store = BlobStore(tmp_path)
    store.put("a", 1, b"x")
    with pytest.raises(VersionConflict):
        store.put("a", 3, b"y")
    store.put("a", 2, b"y")
    assert BlobStore(tmp_path).get("a") == (2, b"y")


def test_concurrent_clients(server):
    names = [f"user{i}" for i in range(50)]

    def one(name):
        client.register(server.address, TEST_256, name, name + "-pw", KDF, cache=None)
        with client.login(server.address, TEST_256, name, name + "-pw", cache=None) as conn:
            conn.put_blob(1, name.encode())
            return conn.get_blob()

    with ThreadPoolExecutor(max_workers=50) as pool:
        results = list(pool.map(one, names))
    assert results == [(1, n.encode()) for n in names]
    assert len(server.accounts) == 50


def test_admin_reset_flow(server_factory):
    admin = io.StringIO()
    srv = server_factory(admin_stream=admin)
    reg(srv)
    srv.admin_command("reset-issue alice")
    line = admin.getvalue().strip()
    assert line.startswith("reset-token alice ")
    token = line.split()[-1]
    pi = int(token, 16)

    with client.login(srv.address, TEST_256, "alice", pi=pi, cache=None) as conn:
        with pytest.raises(ServerError) as err:
            conn.get_blob()
        assert err.value.code == ErrorCode.RESET_LOCKDOWN
        p_pi, h, _ = make_credentials(TEST_256, "fresh", KDF, cache=None)
        conn.change_credentials(p_pi, h)
        assert conn.get_blob() == (0, b"")
    with pytest.raises(AuthenticationFailed):
        client.login(srv.address, TEST_256, "alice", pi=pi, cache=None)
    with pytest.raises(AuthenticationFailed):
        client.login(srv.address, TEST_256, "alice", "pw", cache=None)
    client.login(srv.address, TEST_256, "alice", "fresh", cache=None).close()


def test_admin_unknown_user(server_factory):
    admin = io.StringIO()
    srv = server_factory(admin_stream=admin)
    srv.admin_command("reset-issue ghost")
    srv.admin_command("bogus")
    assert admin.getvalue().count("error:") == 2


def test_in_channel_reset_token(server):
    reg(server)
    with client.login(server.address, TEST_256, "alice", "pw", cache=None) as conn:
        token = conn.reset_begin()
    with client.login(server.address, TEST_256, "alice", pi=int(token, 16), cache=None) as conn:
        with pytest.raises(ServerError):
            conn.get_blob()


def test_channel_before_auth_is_refused(server):
    with socket.create_connection(server.address) as sock:
        sock.sendall(encode(GetBlob()))
        assert decode(read_frame(sock)).code == ErrorCode.PROTOCOL_ORDER


def test_garbage_does_not_kill_server(server):
    with socket.create_connection(server.address) as sock:
        sock.sendall(b"\xff\xff\xff\xff garbage")
    reg(server)


def test_group_pin_refuses_change(server_factory, tmp_path):
    srv = server_factory(data_dir=tmp_path / "pinned")
    srv.close()
    with pytest.raises(ValueError):
        server_factory(data_dir=tmp_path / "pinned", group="toy")


def test_accounts_persist_across_restart(server_factory, tmp_path):
    srv = server_factory(data_dir=tmp_path / "d")
    reg(srv)
    srv.close()
    srv2 = server_factory(data_dir=tmp_path / "d")
    client.login(srv2.address, TEST_256, "alice", "pw", cache=None).close()


def test_session_observer_sees_each_challenge(server_factory):
    seen = []
    lock = threading.Lock()

    def observe(session):
        with lock:
            seen.append(session.secrets_view)

    srv = server_factory(session_observer=observe)
    reg(srv)
    client.login(srv.address, TEST_256, "alice", "pw", cache=None).close()
    assert len(seen) == 1 and all(seen[0])
