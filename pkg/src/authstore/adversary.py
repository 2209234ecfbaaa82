"""Attack harness: a tampering MitM proxy plus online and offline attackers.

Nothing in here is used by the client or server.  The protocol variants
below (unsealed ``v``, exponent blinding) are deliberately weakened copies
that exist only so attacks have a differential baseline.
"""

from __future__ import annotations

import argparse
import io
import json
import random
import socket
import socketserver
import sys
import tempfile
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .account import canonical_username
from .client import Connection, make_credentials
from .group import (
    TEST_256,
    Direction,
    GroupElement,
    GroupError,
    GroupParams,
    hash_to_scalar,
    validate_element,
)
from .messages import AuthChallenge, AuthConfirm, AuthRequest, AuthResponse, ErrorReply, Message
from .pake import (
    AuthFailed,
    PakeClientSession,
    PakeError,
    PakeServerSession,
    ServerAuthFailed,
    SessionKey,
    confirm_key,
    session_key,
)
from .stretch import MIN_MEM_KIB, KdfAlgorithm, KdfParams, to_auth_scalar, user_key_from_password
from .wire import WireError, decode, encode, read_frame

_ZERO_NONCE = bytes(12)


# -- tamper rules ------------------------------------------------------------


@dataclass(frozen=True)
class NoTamper:
    pass


@dataclass(frozen=True)
class WeakenParams:
    """Rewrite the cost fields of the parameters served in message 2."""

    new_time_cost: int = 1
    new_mem_cost: int = MIN_MEM_KIB


@dataclass(frozen=True)
class FlipByte:
    message_index: int
    offset: int
    mask: int = 0x01


TamperRule = NoTamper | WeakenParams | FlipByte


def apply_rule(rule: TamperRule, index: int, raw: bytes) -> bytes:
    """Return the frame the receiver sees for message ``index`` (0-based)."""
    if isinstance(rule, WeakenParams) and index == 1:
        try:
            msg = decode(raw)
        except WireError:
            return raw
        if isinstance(msg, AuthChallenge):
            base = msg.p_pi.base
            if base.algorithm is KdfAlgorithm.MEMORY_HARD:
                base = replace(base, time_cost=rule.new_time_cost, mem_cost=rule.new_mem_cost, parallelism=1)
            else:
                base = replace(base, time_cost=rule.new_time_cost)
            return encode(replace(msg, p_pi=replace(msg.p_pi, base=base)))
    if isinstance(rule, FlipByte) and index == rule.message_index:
        buf = bytearray(raw)
        buf[rule.offset] ^= rule.mask
        return bytes(buf)
    return raw


# -- transcripts ---------------------------------------------------------------


@dataclass(frozen=True)
class ServerView:
    """Insider knowledge of one provider session: ``x``, ``c`` and the verifier."""

    x: int
    c: int
    h: GroupElement

    @classmethod
    def of(cls, session: PakeServerSession) -> ServerView:
        x, c = session.secrets_view
        return cls(x, c, session.h)


@dataclass
class Transcript:
    """Frames as the client saw them, in order; append-only."""

    frames: list[tuple[str, bytes]] = field(default_factory=list)
    server_view: ServerView | None = None

    def append(self, direction: str, raw: bytes) -> None:
        self.frames.append((direction, raw))

    def messages(self) -> list[Message]:
        return [decode(raw) for _, raw in self.frames]

    def __len__(self):
        return len(self.frames)


# -- deliberately weakened protocol variants ------------------------------------


class _UnsealedClient(PakeClientSession):
    def _seal_v(self, sk, v):
        return v


class _UnsealedServer(PakeServerSession):
    def _open_v(self, sk, sealed):
        return sealed


def exponent_mask_scalar(group: GroupParams, key: bytes, direction: Direction, ctx: tuple[str, str]) -> int:
    """Blinding exponent of the ``m * g^r`` construction with a public hash ``r``."""
    a, b = ctx
    return hash_to_scalar(group, "AS-blind-" + Direction(direction).value, [a.encode(), b.encode(), key])


class _ExponentBlinding:
    def _blind(self, key, direction, ctx, m):
        return m * self.group.base_exp(exponent_mask_scalar(self.group, key, direction, ctx))

    def _unblind(self, key, direction, ctx, c):
        return c * self.group.base_exp(-exponent_mask_scalar(self.group, key, direction, ctx))


def session_classes(*, broken: bool = False, exponent_blinding: bool = False):
    """Client and server session classes for a protocol variant."""
    client: type = _UnsealedClient if broken else PakeClientSession
    server: type = _UnsealedServer if broken else PakeServerSession
    if exponent_blinding:
        client = type("ExpBlind" + client.__name__, (_ExponentBlinding, client), {})
        server = type("ExpBlind" + server.__name__, (_ExponentBlinding, server), {})
    return client, server


# -- in-process runs -------------------------------------------------------------


@dataclass
class RunResult:
    transcript: Transcript
    server_accepted: bool
    client_established: bool
    client_sk: SessionKey | None = None
    server_sk: SessionKey | None = None


def simulate(
    group: GroupParams,
    username: str,
    password: str | bytes,
    registered_password: str | bytes,
    kdf_params: KdfParams,
    *,
    rule: TamperRule = NoTamper(),
    broken: bool = False,
    exponent_blinding: bool = False,
    provider_id: str = "provider",
    rng=None,
    cache=None,
) -> RunResult:
    """Register ``registered_password`` and authenticate with ``password`` in process.

    Frames pass through ``rule`` exactly as through the MitM proxy; the
    transcript holds what the client sent and received.
    """
    client_cls, server_cls = session_classes(broken=broken, exponent_blinding=exponent_blinding)
    p_pi, h, _ = make_credentials(group, registered_password, kdf_params, cache)
    client = client_cls(group, username, rng=rng, cache=cache)
    server = server_cls(group, provider_id, canonical_username(username), p_pi, h, rng=rng)
    transcript = Transcript()
    result = RunResult(transcript, False, False)

    def hop(index: int, msg: Message, to_client: bool) -> Message:
        raw = encode(msg)
        seen = apply_rule(rule, index, raw)
        transcript.append("s2c" if to_client else "c2s", seen if to_client else raw)
        return decode(seen)

    try:
        m1 = hop(0, client.start(), False)
        if not isinstance(m1, AuthRequest) or canonical_username(m1.username) != server.username:
            return result
        m2 = hop(1, server.on_request(m1), True)
        transcript.server_view = ServerView.of(server)
        m3 = hop(2, client.on_challenge(m2, password), False)
        try:
            m4 = server.on_response(m3)
        except AuthFailed:
            return result
        result.server_accepted, result.server_sk = True, server.sk
        m4 = hop(3, m4, True)
        result.client_sk = client.on_confirm(m4)
        result.client_established = True
    except (WireError, PakeError, ValueError):
        pass
    return result


# -- offline attacker --------------------------------------------------------------


def dictionary_attack(
    transcript: Transcript,
    server_view: ServerView,
    candidates,
    group: GroupParams,
    *,
    broken: bool = False,
    exponent_blinding: bool = False,
) -> list:
    """Candidates a malicious provider can confirm from one transcript.

    For each guess the attacker derives ``pi*`` under the parameters the
    client actually received, unblinds the client's values with
    ``h* = g^pi*``, rebuilds every session key it can with its knowledge of
    ``x`` and ``c``, and checks whether message 3 carries ``(h*)^c``.
    """
    msgs = transcript.messages()
    m1 = next(m for m in msgs if isinstance(m, AuthRequest))
    m2 = next(m for m in msgs if isinstance(m, AuthChallenge))
    m3 = next(m for m in msgs if isinstance(m, AuthResponse))
    a, b = canonical_username(m1.username), m2.provider_id
    ctx = (a, b)
    client_cls, _ = session_classes(broken=broken, exponent_blinding=exponent_blinding)
    unblinder = client_cls(group, a, cache=None)
    x, c, h_true = server_view.x, server_view.c, server_view.h
    x_elem = group.base_exp(x)
    try:
        enc_x = validate_element(group, m2.enc_x)
        enc_y = validate_element(group, m3.enc_y)
    except GroupError:
        return []

    confirmed = []
    for pw in candidates:
        pi = to_auth_scalar(user_key_from_password(m2.p_pi, pw, cache=None), group)
        h_guess = group.base_exp(pi)
        v_expected = (h_guess ** c).encode()
        if broken:
            if m3.enc_v == v_expected:
                confirmed.append(pw)
            continue
        key = h_guess.encode()
        y_guess = unblinder._unblind(key, Direction.CLIENT, ctx, enc_y)
        x_client = unblinder._unblind(key, Direction.SERVER, ctx, enc_x)
        # Z = X'^y.  Known only if X' == g^x (guess equals the real h) or if
        # the blinding exposes the discrete log of X'.
        z_options = []
        if x_client == x_elem:
            z_options.append(y_guess ** x)
        if exponent_blinding:
            shift = exponent_mask_scalar(group, h_true.encode(), Direction.SERVER, ctx) - exponent_mask_scalar(
                group, key, Direction.SERVER, ctx
            )
            z_options.append(y_guess ** (x + shift))
        for z in z_options:
            sk = session_key(a, b, x_client, y_guess, z)
            try:
                v = AESGCM(confirm_key(sk)).decrypt(_ZERO_NONCE, m3.enc_v, None)
            except InvalidTag:
                continue
            if v == v_expected:
                confirmed.append(pw)
                break
    return confirmed


# -- online attackers ---------------------------------------------------------------


def stolen_verifier_attack(
    h: GroupElement | None,
    p_pi,
    address: tuple[str, int],
    group: GroupParams,
    username: str,
    rng=None,
) -> bool:
    """Try to log in holding only the provider's stored ``(h, P_pi)``.

    With ``h`` the attacker unblinds ``g^x`` and blinds its own ``g^y``
    correctly, so it shares ``sk`` with the provider.  It still has to put
    ``h^c`` under the seal; knowing ``h = g^pi`` and ``g^c`` but neither
    exponent, the best it can send is ``h`` itself.  Without ``h`` it
    blinds under a random verifier.  Returns whether the provider accepted.
    """
    rng = rng or random.SystemRandom()
    if h is None:
        h = group.base_exp(group.random_scalar(rng))
    with Connection(address, group) as conn:
        conn.send(AuthRequest(username))
        m2 = conn.recv()
        if not isinstance(m2, AuthChallenge):
            return False
        ctx = (canonical_username(username), m2.provider_id)
        tool = PakeClientSession(group, username, rng=rng, cache=None)
        key = h.encode()
        try:
            x_elem = tool._unblind(key, Direction.SERVER, ctx, validate_element(group, m2.enc_x))
        except GroupError:
            return False
        y = group.random_scalar(rng)
        y_elem = group.base_exp(y)
        sk = session_key(ctx[0], ctx[1], x_elem, y_elem, x_elem ** y)
        v_guess = h
        conn.send(AuthResponse(tool._blind(key, Direction.CLIENT, ctx, y_elem).encode(), tool._seal_v(sk, v_guess.encode())))
        try:
            reply = conn.recv()
        except (WireError, ConnectionError):
            return False
        return isinstance(reply, AuthConfirm)


def replay_attack(address: tuple[str, int], group: GroupParams, username: str, m3: AuthResponse) -> bool:
    """Answer a fresh challenge with a message 3 captured from an earlier session."""
    with Connection(address, group) as conn:
        conn.send(AuthRequest(username))
        if not isinstance(conn.recv(), AuthChallenge):
            return False
        conn.send(m3)
        try:
            return isinstance(conn.recv(), AuthConfirm)
        except (WireError, ConnectionError):
            return False


# -- MitM proxy ----------------------------------------------------------------------


class MitmProxy:
    """Frame-level forwarding proxy; one connection at a time.

    Each accepted connection gets its own transcript (frames as delivered
    to or sent by the client), appended to ``transcripts``.
    """

    def __init__(self, upstream: tuple[str, int], rule: TamperRule = NoTamper(), listen=("127.0.0.1", 0)):
        self.upstream = upstream
        self.rule = rule
        self.transcripts: list[Transcript] = []
        proxy = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                proxy._relay(self.request)

        self._server = socketserver.TCPServer(listen, Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def _relay(self, client: socket.socket) -> None:
        transcript = Transcript()
        self.transcripts.append(transcript)
        counter = [0]
        lock = threading.Lock()
        upstream = socket.create_connection(self.upstream, timeout=30)

        def pump(src, dst, direction):
            try:
                while True:
                    raw = read_frame(src)
                    with lock:
                        index = counter[0]
                        counter[0] += 1
                        out = apply_rule(self.rule, index, raw)
                        transcript.append(direction, raw if direction == "c2s" else out)
                    dst.sendall(out)
            except (WireError, OSError):
                pass
            finally:
                for s in (src, dst):
                    try:
                        s.shutdown(socket.SHUT_RDWR)
                    except OSError:
                        pass

        t = threading.Thread(target=pump, args=(upstream, client, "s2c"), daemon=True)
        t.start()
        pump(client, upstream, "c2s")
        t.join()
        upstream.close()

    def start(self) -> tuple[str, int]:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self.address

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.close()


# -- scenarios -------------------------------------------------------------------------


def candidate_list(true_password: str | None, n: int, rng: random.Random) -> list[str]:
    """``n`` distinct random guesses, with the true password at a random slot if given."""
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789"
    guesses: set[str] = set()
    while len(guesses) < n - (1 if true_password else 0):
        g = "".join(rng.choice(alphabet) for _ in range(rng.randint(6, 12)))
        if g != true_password:
            guesses.add(g)
    out = sorted(guesses)
    if true_password:
        out.insert(rng.randrange(len(out) + 1), true_password)
    return out


def parameter_attack_scenario(
    trials: int = 10,
    candidates: int = 1000,
    *,
    broken: bool = False,
    exponent_blinding: bool = False,
    seed: int = 0,
    group: GroupParams = TEST_256,
) -> dict:
    """MitM weakens the served parameters; the provider then attacks offline."""
    rng = random.Random(seed)
    successes, false_positives, server_accepts = 0, 0, 0
    for _ in range(trials):
        pw = "".join(rng.choice("abcdefghijklmnopqrstuvwxyz") for _ in range(10))
        strong = KdfParams.test_iterated(time_cost=1000, salt=rng.randbytes(16))
        run = simulate(group, "alice", pw, pw, strong, rule=WeakenParams(1, MIN_MEM_KIB), broken=broken,
                       exponent_blinding=exponent_blinding, rng=rng)
        server_accepts += run.server_accepted
        hits = dictionary_attack(run.transcript, run.transcript.server_view, candidate_list(pw, candidates, rng),
                                 group, broken=broken, exponent_blinding=exponent_blinding)
        successes += pw in hits
        false_positives += sum(1 for h in hits if h != pw)
    variant = "unsealed-v" if broken else ("exponent-blinding" if exponent_blinding else "compactpake")
    return {
        "scenario": "parameter-attack",
        "trials": trials,
        "successes": successes,
        "details": {
            "variant": variant,
            "candidates_per_trial": candidates,
            "false_positives": false_positives,
            "server_accepts_weakened_login": server_accepts,
            "confirmation_rate": successes / trials if trials else 0.0,
        },
    }


STOLEN_VERIFIER_FINDING = (
    "An attacker holding (h, P_pi) unblinds g^x and shares the session key with the provider, "
    "but the provider also requires v = h^c under that key. From h = g^pi and g^c alone this is a "
    "computational Diffie-Hellman value, so the attacker cannot produce it and the provider rejects. "
    "The verifier does let its holder run the provider role towards the user. "
    "Cross-reference: the stolen-verifier open question in the authstore.pake module notes."
)


def _with_local_server(fn):
    from .server import AuthServer, ServerConfig

    with tempfile.TemporaryDirectory() as tmp:
        config = ServerConfig(Path(tmp), port=0, group=TEST_256.name, provider_id="harness",
                              rate_limit=10**9, decoy_kdf=KdfParams.test_iterated(1, bytes(16)))
        server = AuthServer(config, admin_stream=io.StringIO())
        with server:
            return fn(server)


def stolen_verifier_scenario(trials: int = 100, seed: int = 0) -> dict:
    def run(server):
        rng = random.Random(seed)
        conn_addr = server.address
        kdf = KdfParams.test_iterated(1)
        p_pi, h, _ = make_credentials(TEST_256, "correct horse", kdf, cache=None)
        server.accounts.register("victim", p_pi, h)
        rec = server.accounts.get("victim")
        with_h = sum(stolen_verifier_attack(rec.h, rec.p_pi, conn_addr, TEST_256, "victim", rng) for _ in range(trials))
        without_h = sum(stolen_verifier_attack(None, rec.p_pi, conn_addr, TEST_256, "victim", rng) for _ in range(trials))
        return {
            "scenario": "stolen-verifier",
            "trials": trials,
            "successes": with_h,
            "details": {
                "impersonations_with_h": with_h,
                "impersonations_without_h": without_h,
                "stable": with_h in (0, trials),
                "finding": STOLEN_VERIFIER_FINDING,
            },
        }

    return _with_local_server(run)


def mitm_scenario(rule: TamperRule, trials: int = 1) -> dict:
    def run(server):
        kdf = KdfParams.test_iterated(1000)
        p_pi, h, _ = make_credentials(TEST_256, "pw-mitm", kdf, cache=None)
        server.accounts.register("bob", p_pi, h)
        ok, outcomes = 0, []
        with MitmProxy(server.address, rule) as proxy:
            for _ in range(trials):
                conn = Connection(proxy.address, TEST_256)
                try:
                    conn.authenticate("bob", "pw-mitm", cache=None)
                    ok += 1
                    outcomes.append("established")
                except Exception as exc:
                    outcomes.append(type(exc).__name__)
                finally:
                    conn.close()
            frames = [len(t) for t in proxy.transcripts]
        return {"scenario": "mitm", "trials": trials, "successes": ok,
                "details": {"rule": type(rule).__name__, "outcomes": outcomes, "frames_per_connection": frames}}

    return _with_local_server(run)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="authstore-adversary", description="Run attack scenarios; prints JSON.")
    sub = parser.add_subparsers(dest="scenario", required=True)
    p = sub.add_parser("parameter-attack", help="MitM weakens P_pi, insider dictionary attack")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--candidates", type=int, default=1000)
    p.add_argument("--broken", action="store_true", help="send v unsealed (deliberately broken variant)")
    p.add_argument("--exponent-blinding", action="store_true", help="blind with g^H(h) instead of hash-to-group")
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("stolen-verifier", help="impersonate a user from the stored verifier")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("mitm", help="authenticate through a tampering proxy")
    p.add_argument("--rule", choices=["none", "weaken", "flip-m4"], default="none")
    p.add_argument("--trials", type=int, default=1)
    args = parser.parse_args(argv)

    if args.scenario == "parameter-attack":
        report = parameter_attack_scenario(args.trials, args.candidates, broken=args.broken,
                                           exponent_blinding=args.exponent_blinding, seed=args.seed)
    elif args.scenario == "stolen-verifier":
        report = stolen_verifier_scenario(args.trials, args.seed)
    else:
        rule = {"none": NoTamper(), "weaken": WeakenParams(), "flip-m4": FlipByte(3, -1)}[args.rule]
        report = mitm_scenario(rule, args.trials)
    print(json.dumps(report, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
