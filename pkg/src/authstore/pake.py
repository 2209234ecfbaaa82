"""CompactPAKE: four-message asymmetric PAKE with parameter retrieval.

Message flow (client A, provider B holding ``h = g^pi`` and ``P_pi``)::

    1. A -> B   username
    2. B -> A   B, E_h(g^x), P_pi, g^c
    3. A -> B   E_h(g^y), E_sk(v)            v = (g^c)^pi
    4. B -> A   H(sk || 1)                   only if v == h^c

    sk = H(A, B, g^x, g^y, g^xy)

``E_h`` is the element blinding from :mod:`authstore.group` keyed by the
encoding of ``h``; ``E_sk`` is AES-256-GCM under ``H("AS-esk", sk)`` with
a zero nonce, which is safe because every session key is used once.

Stolen verifier (open question)
-------------------------------
Whether ``h`` alone lets an attacker log in as the user was left open.
Holding ``h`` is enough to unblind ``g^x`` and agree on ``sk``, but
message 3 must also carry ``h^c``, and computing that from ``h`` and
``g^c`` is a Diffie-Hellman problem.  The adversary harness measures this
(``authstore.adversary.stolen_verifier_scenario``) rather than assuming
an answer.
"""

from __future__ import annotations

import enum
import hmac

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .account import canonical_username
from .group import (
    Direction,
    GroupElement,
    GroupError,
    GroupParams,
    blind_decrypt,
    blind_encrypt,
    validate_element,
)
from .hashing import labeled_hash
from .messages import AuthChallenge, AuthConfirm, AuthRequest, AuthResponse
from .stretch import DEFAULT_CACHE, BaseKeyCache, UserKeyParams, to_auth_scalar, user_key_from_password

_ZERO_NONCE = bytes(12)


class PakeError(Exception):
    pass


class MalformedChallenge(PakeError):
    pass


class AuthFailed(PakeError):
    """The provider rejected the client; deliberately carries no detail."""


class ServerAuthFailed(PakeError):
    """The provider's key confirmation did not match."""


class ProtocolOrder(PakeError):
    pass


class ClientState(enum.Enum):
    AWAIT_CHALLENGE = "await-challenge"
    AWAIT_CONFIRM = "await-confirm"
    ESTABLISHED = "established"
    FAILED = "failed"


class ServerState(enum.Enum):
    AWAIT_RESPONSE = "await-response"
    DONE = "done"
    FAILED = "failed"


class SessionKey:
    __slots__ = ("bytes",)

    def __init__(self, data: bytes):
        if len(data) != 32:
            raise ValueError("session key must be 32 bytes")
        self.bytes = bytes(data)

    def __eq__(self, other):
        return isinstance(other, SessionKey) and hmac.compare_digest(self.bytes, other.bytes)

    def __hash__(self):
        return hash(self.bytes)

    def __repr__(self):
        return "SessionKey(<redacted>)"


def session_key(a: str, b: str, x: GroupElement, y: GroupElement, z: GroupElement) -> SessionKey:
    return SessionKey(
        labeled_hash("AS-sk", a.encode("utf-8"), b.encode("utf-8"), x.encode(), y.encode(), z.encode())
    )


def confirm_key(sk: SessionKey) -> bytes:
    return labeled_hash("AS-esk", sk.bytes)


def confirmation(sk: SessionKey) -> bytes:
    return labeled_hash("AS-conf1", sk.bytes)


def channel_keys(sk: SessionKey) -> tuple[bytes, bytes]:
    """Return ``(client_to_server, server_to_client)`` channel keys."""
    return labeled_hash("AS-c2s", sk.bytes), labeled_hash("AS-s2c", sk.bytes)


class PakeClientSession:
    def __init__(
        self,
        group: GroupParams,
        username: str,
        rng=None,
        cache: BaseKeyCache | None = DEFAULT_CACHE,
    ):
        self.group = group
        self.username = canonical_username(username)
        self.rng = rng
        self.cache = cache
        self.state = ClientState.AWAIT_CHALLENGE
        self.provider_id: str | None = None
        self.p_pi: UserKeyParams | None = None
        self.sk: SessionKey | None = None
        self._y: int | None = None

    def start(self) -> AuthRequest:
        return AuthRequest(self.username)

    # Overridable primitives; the adversary harness swaps these out.
    def _blind(self, key: bytes, direction: Direction, ctx, m: GroupElement) -> GroupElement:
        return blind_encrypt(self.group, key, direction, ctx, m)

    def _unblind(self, key: bytes, direction: Direction, ctx, c: GroupElement) -> GroupElement:
        return blind_decrypt(self.group, key, direction, ctx, c)

    def _seal_v(self, sk: SessionKey, v: bytes) -> bytes:
        return AESGCM(confirm_key(sk)).encrypt(_ZERO_NONCE, v, None)

    def on_challenge(
        self, m2: AuthChallenge, password: bytes | str | None = None, *, pi: int | None = None
    ) -> AuthResponse:
        """Answer the provider's challenge.

        Pass ``pi`` instead of a password to authenticate with a known
        authentication scalar (account reset), skipping key derivation.
        A wrong password does not raise here; it yields keys the provider
        will reject.
        """
        if self.state is not ClientState.AWAIT_CHALLENGE:
            raise ProtocolOrder(f"challenge received in state {self.state.value}")
        grp = self.group
        try:
            enc_x = validate_element(grp, m2.enc_x)
            big_c = validate_element(grp, m2.c)
        except GroupError as exc:
            self.state = ClientState.FAILED
            raise MalformedChallenge(str(exc)) from exc
        try:
            if pi is None:
                if password is None:
                    raise ValueError("either password or pi is required")
                pi = to_auth_scalar(user_key_from_password(m2.p_pi, password, self.cache), grp)
        except Exception:
            self.state = ClientState.FAILED
            raise
        self.provider_id = m2.provider_id
        self.p_pi = m2.p_pi
        ctx = (self.username, m2.provider_id)
        key = grp.base_exp(pi).encode()

        x_elem = self._unblind(key, Direction.SERVER, ctx, enc_x)
        v = big_c ** pi
        self._y = grp.random_scalar(self.rng)
        y_elem = grp.base_exp(self._y)
        self.sk = session_key(self.username, m2.provider_id, x_elem, y_elem, x_elem ** self._y)
        self.state = ClientState.AWAIT_CONFIRM
        return AuthResponse(
            enc_y=self._blind(key, Direction.CLIENT, ctx, y_elem).encode(),
            enc_v=self._seal_v(self.sk, v.encode()),
        )

    def on_confirm(self, m4: AuthConfirm) -> SessionKey:
        if self.state is not ClientState.AWAIT_CONFIRM:
            raise ProtocolOrder(f"confirmation received in state {self.state.value}")
        if not hmac.compare_digest(m4.conf, confirmation(self.sk)):
            self.state = ClientState.FAILED
            self.sk = None
            raise ServerAuthFailed("provider key confirmation mismatch")
        self.state = ClientState.ESTABLISHED
        return self.sk

    def fail(self) -> None:
        self.state = ClientState.FAILED
        self.sk = None


class PakeServerSession:
    """Provider side of one authentication attempt; single use.

    ``h`` is the verifier the session checks against.  The caller chooses
    it: normally the account's verifier, otherwise a pending reset verifier or a decoy.
    """

    def __init__(
        self,
        group: GroupParams,
        provider_id: str,
        username: str,
        p_pi: UserKeyParams,
        h: GroupElement,
        rng=None,
    ):
        self.group = group
        self.provider_id = provider_id
        self.username = username
        self.p_pi = p_pi
        self.h = h
        self.rng = rng
        self.state: ServerState | None = None
        self.sk: SessionKey | None = None
        self._x: int | None = None
        self._c: int | None = None
        self._x_elem: GroupElement | None = None

    def _blind(self, key: bytes, direction: Direction, ctx, m: GroupElement) -> GroupElement:
        return blind_encrypt(self.group, key, direction, ctx, m)

    def _unblind(self, key: bytes, direction: Direction, ctx, c: GroupElement) -> GroupElement:
        return blind_decrypt(self.group, key, direction, ctx, c)

    def _open_v(self, sk: SessionKey, sealed: bytes) -> bytes:
        return AESGCM(confirm_key(sk)).decrypt(_ZERO_NONCE, sealed, None)

    @property
    def authenticated_user(self) -> str | None:
        return self.username if self.state is ServerState.DONE else None

    @property
    def secrets_view(self) -> tuple[int, int]:
        """The session's ``(x, c)``; exposed for insider-attack modelling."""
        return self._x, self._c

    def on_request(self, m1: AuthRequest) -> AuthChallenge:
        if self.state is not None:
            raise ProtocolOrder("session already started")
        if canonical_username(m1.username) != self.username:
            raise ValueError("request username does not match the session account")
        grp = self.group
        self._x = grp.random_scalar(self.rng)
        self._c = grp.random_scalar(self.rng)
        self._x_elem = grp.base_exp(self._x)
        ctx = (self.username, self.provider_id)
        self.state = ServerState.AWAIT_RESPONSE
        return AuthChallenge(
            provider_id=self.provider_id,
            enc_x=self._blind(self.h.encode(), Direction.SERVER, ctx, self._x_elem).encode(),
            p_pi=self.p_pi,
            c=grp.base_exp(self._c).encode(),
        )

    def on_response(self, m3: AuthResponse) -> AuthConfirm:
        if self.state is not ServerState.AWAIT_RESPONSE:
            raise ProtocolOrder(f"response received in state {self.state}")
        grp = self.group
        ctx = (self.username, self.provider_id)
        accepted = False
        try:
            y_elem = self._unblind(self.h.encode(), Direction.CLIENT, ctx, validate_element(grp, m3.enc_y))
            if y_elem != grp.identity:
                sk = session_key(self.username, self.provider_id, self._x_elem, y_elem, y_elem ** self._x)
                v = self._open_v(sk, m3.enc_v)
                accepted = hmac.compare_digest(v, (self.h ** self._c).encode())
        except (GroupError, InvalidTag, ValueError):
            accepted = False
        if not accepted:
            self.state = ServerState.FAILED
            raise AuthFailed("authentication failed")
        self.sk = sk
        self.state = ServerState.DONE
        return AuthConfirm(confirmation(sk))


def client_start(
    group: GroupParams, username: str, rng=None, cache: BaseKeyCache | None = DEFAULT_CACHE
) -> tuple[AuthRequest, PakeClientSession]:
    session = PakeClientSession(group, username, rng=rng, cache=cache)
    return session.start(), session


def server_on_request(
    group: GroupParams,
    provider_id: str,
    m1: AuthRequest,
    p_pi: UserKeyParams,
    h: GroupElement,
    rng=None,
) -> tuple[AuthChallenge, PakeServerSession]:
    session = PakeServerSession(group, provider_id, canonical_username(m1.username), p_pi, h, rng=rng)
    return session.on_request(m1), session


def client_on_challenge(session: PakeClientSession, m2: AuthChallenge, password=None, *, pi=None) -> AuthResponse:
    return session.on_challenge(m2, password, pi=pi)


def server_on_response(session: PakeServerSession, m3: AuthResponse) -> AuthConfirm:
    return session.on_response(m3)


def client_on_confirm(session: PakeClientSession, m4: AuthConfirm) -> SessionKey:
    return session.on_confirm(m4)
