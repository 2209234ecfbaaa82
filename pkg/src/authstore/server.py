"""The service provider: accounts and per-user blob storage behind a TCP listener.

Each connection starts in plaintext.  ``Register`` may be sent any number
of times; an ``AuthRequest`` runs the four-message handshake, after which
every frame is a sealed channel frame keyed from the session key.  An
authentication failure closes the connection without a reply.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import socket
import socketserver
import struct
import sys
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path

from .account import (
    AccountStore,
    InvalidUsername,
    InvalidVerifier,
    NotAuthenticated,
    UnknownUser,
    UserExists,
    canonical_username,
    decoy_record,
)
from .group import GroupParams, get_profile
from .messages import (
    AuthRequest,
    AuthResponse,
    BlobData,
    ChangeCredentials,
    ErrorCode,
    ErrorReply,
    GetBlob,
    Message,
    Ok,
    PutBlob,
    Register,
    RegisterOk,
    ResetBegin,
    ResetToken,
)
from .pake import AuthFailed, PakeServerSession, channel_keys
from .stretch import KdfAlgorithm, KdfParams
from .wire import SecureChannel, WireError, decode, encode, read_frame

log = logging.getLogger(__name__)

DATA_DIR_ENV = "AUTHSTORE_DATA_DIR"


@dataclass
class ServerConfig:
    data_dir: Path
    host: str = "127.0.0.1"
    port: int = 7440
    group: str = "modp-2048"
    provider_id: str = "authstore"
    rate_limit: int = 5
    rate_window: float = 60.0
    io_timeout: float = 30.0
    # Cost parameters advertised for unknown usernames.
    decoy_kdf: KdfParams = field(default_factory=KdfParams.memory_hard)

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)


class VersionConflict(Exception):
    pass


class BlobStore:
    """One versioned blob per user; a put must name ``current + 1``."""

    def __init__(self, root: Path | None):
        self.root = root
        self._mem: dict[str, tuple[int, bytes]] = {}
        self._lock = threading.Lock()
        if root is not None:
            root.mkdir(parents=True, exist_ok=True)

    def _path(self, username: str) -> Path:
        return self.root / (username.encode("utf-8").hex() + ".blob")

    def get(self, username: str) -> tuple[int, bytes]:
        with self._lock:
            if self.root is None:
                return self._mem.get(username, (0, b""))
            path = self._path(username)
            if not path.exists():
                return 0, b""
            data = path.read_bytes()
            return struct.unpack(">Q", data[:8])[0], data[8:]

    def put(self, username: str, version: int, blob: bytes) -> None:
        with self._lock:
            if self.root is None:
                current = self._mem.get(username, (0, b""))[0]
            else:
                path = self._path(username)
                current = struct.unpack(">Q", path.read_bytes()[:8])[0] if path.exists() else 0
            if version != current + 1:
                raise VersionConflict(f"expected version {current + 1}, got {version}")
            if self.root is None:
                self._mem[username] = (version, blob)
                return
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(struct.pack(">Q", version) + blob)
            os.replace(tmp, path)


class RateLimiter:
    """Sliding-window count of failed authentications per username."""

    def __init__(self, limit: int, window: float, clock=time.monotonic):
        self.limit = limit
        self.window = window
        self.clock = clock
        self._failures: defaultdict[str, deque] = defaultdict(deque)
        self._lock = threading.Lock()

    def _trim(self, q: deque, now: float) -> None:
        while q and now - q[0] >= self.window:
            q.popleft()

    def blocked(self, username: str) -> bool:
        with self._lock:
            q = self._failures[username]
            self._trim(q, self.clock())
            return len(q) >= self.limit

    def record_failure(self, username: str) -> None:
        with self._lock:
            now = self.clock()
            q = self._failures[username]
            self._trim(q, now)
            q.append(now)


def _kdf_to_json(p: KdfParams) -> dict:
    return {"algorithm": int(p.algorithm), "mem_cost": p.mem_cost, "time_cost": p.time_cost,
            "parallelism": p.parallelism}


def _kdf_from_json(d: dict) -> KdfParams:
    return KdfParams(KdfAlgorithm(d["algorithm"]), bytes(16), d["time_cost"], d["mem_cost"], d["parallelism"])


def prepare_data_dir(config: ServerConfig) -> bytes:
    """Create or check the data directory; returns the decoy secret.

    The group profile and decoy parameters are pinned on first start, and a
    later start with a different profile is refused.
    """
    root = config.data_dir
    root.mkdir(parents=True, exist_ok=True)
    meta_path = root / "server.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta["group"] != config.group:
            raise ValueError(f"data directory is pinned to group {meta['group']!r}, not {config.group!r}")
        config.decoy_kdf = _kdf_from_json(meta["decoy_kdf"])
    else:
        meta_path.write_text(json.dumps({"group": config.group, "decoy_kdf": _kdf_to_json(config.decoy_kdf)}))
    key_path = root / "decoy.key"
    if not key_path.exists():
        fd = os.open(key_path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(secrets.token_bytes(32))
    secret = key_path.read_bytes()
    if len(secret) != 32:
        raise ValueError("decoy.key must hold 32 bytes")
    return secret


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        self.server.app.handle_connection(self.request)


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class AuthServer:
    def __init__(self, config: ServerConfig, *, admin_stream=None, rng=None, clock=time.time,
                 session_observer=None):
        self.config = config
        self.group: GroupParams = get_profile(config.group)
        self.decoy_secret = prepare_data_dir(config)
        self.accounts = AccountStore(self.group, config.data_dir / "accounts.db", clock=clock)
        self.blobs = BlobStore(config.data_dir / "blobs")
        self.limiter = RateLimiter(config.rate_limit, config.rate_window)
        self.admin_stream = admin_stream if admin_stream is not None else sys.stdout
        self.rng = rng
        # Test hook: called with each provider session once its challenge is out.
        self.session_observer = session_observer
        self._tcp: _TCPServer | None = None
        self._thread: threading.Thread | None = None
        self._admin_lock = threading.Lock()

    # -- admin -----------------------------------------------------------

    def admin_reset_issue(self, username: str) -> str:
        """Issue a reset token and print it on the operator stream only."""
        token = self.accounts.begin_reset(username)
        with self._admin_lock:
            print(f"reset-token {canonical_username(username)} {token}", file=self.admin_stream, flush=True)
        return token

    def admin_command(self, line: str) -> None:
        parts = line.split()
        if not parts:
            return
        if parts[0] == "reset-issue" and len(parts) == 2:
            try:
                self.admin_reset_issue(parts[1])
            except (UnknownUser, InvalidUsername) as exc:
                print(f"error: unknown user {exc}", file=self.admin_stream, flush=True)
        else:
            print(f"error: unknown admin command {parts[0]!r}", file=self.admin_stream, flush=True)

    # -- connection driver -------------------------------------------------

    def handle_connection(self, sock: socket.socket) -> None:
        sock.settimeout(self.config.io_timeout)
        try:
            while True:
                msg = decode(read_frame(sock))
                if isinstance(msg, Register):
                    sock.sendall(encode(self._register(msg)))
                elif isinstance(msg, AuthRequest):
                    outcome = self._authenticate(sock, msg)
                    if outcome is not None:
                        self._serve_channel(sock, *outcome)
                    return
                else:
                    sock.sendall(encode(ErrorReply(ErrorCode.PROTOCOL_ORDER)))
                    return
        except (WireError, OSError) as exc:
            log.debug("connection ended: %s", exc)
        except Exception:
            log.exception("connection handler crashed")

    def _register(self, msg: Register) -> Message:
        try:
            self.accounts.register(msg.username, msg.p_pi, msg.h)
        except UserExists:
            return ErrorReply(ErrorCode.USER_EXISTS)
        except InvalidUsername:
            return ErrorReply(ErrorCode.INVALID_USERNAME)
        except InvalidVerifier:
            return ErrorReply(ErrorCode.INVALID_VERIFIER)
        log.info("registered %s", canonical_username(msg.username))
        return RegisterOk()

    def _authenticate(self, sock: socket.socket, m1: AuthRequest):
        try:
            name = canonical_username(m1.username)
        except InvalidUsername:
            sock.sendall(encode(ErrorReply(ErrorCode.INVALID_USERNAME)))
            return None
        if self.limiter.blocked(name):
            sock.sendall(encode(ErrorReply(ErrorCode.RATE_LIMITED)))
            return None
        picked = self.accounts.auth_verifier(name)
        if picked is None:
            rec = decoy_record(self.group, self.decoy_secret, name, self.config.decoy_kdf)
            h, via_reset, real = rec.h, False, False
        else:
            (rec, h, via_reset), real = picked, True
        session = PakeServerSession(self.group, self.config.provider_id, name, rec.p_pi, h, rng=self.rng)
        sock.sendall(encode(session.on_request(m1)))
        if self.session_observer is not None:
            self.session_observer(session)
        m3 = decode(read_frame(sock))
        if not isinstance(m3, AuthResponse):
            sock.sendall(encode(ErrorReply(ErrorCode.PROTOCOL_ORDER)))
            return None
        try:
            m4 = session.on_response(m3)
            if not real or (via_reset and not self.accounts.consume_reset(name, h)):
                raise AuthFailed("authentication failed")
        except AuthFailed:
            self.limiter.record_failure(name)
            log.info("failed authentication for %s", name)
            return None
        sock.sendall(encode(m4))
        log.info("authenticated %s%s", name, " with reset token" if via_reset else "")
        return session, via_reset

    def _serve_channel(self, sock: socket.socket, session: PakeServerSession, locked: bool) -> None:
        c2s, s2c = channel_keys(session.sk)
        chan = SecureChannel(send_key=s2c, recv_key=c2s)
        name = session.username
        while True:
            msg = chan.open(read_frame(sock))
            if locked and not isinstance(msg, ChangeCredentials):
                reply: Message = ErrorReply(ErrorCode.RESET_LOCKDOWN)
            elif isinstance(msg, GetBlob):
                reply = BlobData(*self.blobs.get(name))
            elif isinstance(msg, PutBlob):
                try:
                    self.blobs.put(name, msg.version, msg.blob)
                    reply = Ok()
                except VersionConflict:
                    reply = ErrorReply(ErrorCode.VERSION_CONFLICT)
            elif isinstance(msg, ChangeCredentials):
                try:
                    self.accounts.change_credentials(name, session, msg.p_pi, msg.h)
                    reply, locked = Ok(), False
                except InvalidVerifier:
                    reply = ErrorReply(ErrorCode.INVALID_VERIFIER)
                except (NotAuthenticated, UnknownUser):
                    reply = ErrorReply(ErrorCode.AUTH_FAILED)
            elif isinstance(msg, ResetBegin):
                reply = ResetToken(self.accounts.begin_reset(name))
            else:
                reply = ErrorReply(ErrorCode.PROTOCOL_ORDER)
            sock.sendall(chan.seal(reply))

    # -- lifecycle ---------------------------------------------------------

    def bind(self) -> tuple[str, int]:
        self._tcp = _TCPServer((self.config.host, self.config.port), _Handler)
        self._tcp.app = self
        return self._tcp.server_address[:2]

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    def start(self) -> tuple[str, int]:
        """Bind and serve on a background thread; returns the bound address."""
        addr = self.bind()
        self._thread = threading.Thread(target=self._tcp.serve_forever, name="authstore-server", daemon=True)
        self._thread.start()
        return addr

    def serve_forever(self) -> None:
        if self._tcp is None:
            self.bind()
        self._tcp.serve_forever()

    def close(self) -> None:
        if self._tcp is not None:
            self._tcp.shutdown()
            self._tcp.server_close()
            self._tcp = None
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.close()


def _parse_listen(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    return host or "127.0.0.1", int(port)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="authstore-server", description="Run an AuthStore service provider.")
    parser.add_argument("--listen", default="127.0.0.1:7440", help="host:port to listen on")
    parser.add_argument("--data-dir", default=os.environ.get(DATA_DIR_ENV, "authstore-data"))
    parser.add_argument("--group", default="modp-2048", choices=["toy", "test-256", "modp-2048"])
    parser.add_argument("--provider-id", default="authstore")
    parser.add_argument("--rate-limit", type=int, default=5, help="failed logins per user per minute")
    parser.add_argument("--admin-stdin", action="store_true",
                        help="read admin commands (reset-issue <user>) from stdin")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    host, port = _parse_listen(args.listen)
    config = ServerConfig(Path(args.data_dir), host=host, port=port, group=args.group,
                          provider_id=args.provider_id, rate_limit=args.rate_limit)
    server = AuthServer(config)
    host, port = server.bind()
    log.info("listening on %s:%d (group %s)", host, port, config.group)
    if args.admin_stdin:
        def admin_loop():
            for line in sys.stdin:
                server.admin_command(line)
        threading.Thread(target=admin_loop, daemon=True).start()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
