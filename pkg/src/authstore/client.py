"""Client side of the AuthStore protocol over a stream socket."""

from __future__ import annotations

import socket

from .group import GroupElement, GroupParams
from .messages import (
    AuthChallenge,
    AuthConfirm,
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
from .pake import PakeClientSession, SessionKey, channel_keys
from .stretch import (
    DEFAULT_CACHE,
    BaseKey,
    BaseKeyCache,
    KdfParams,
    UserKey,
    UserKeyParams,
    cached_base_key,
    derive_user_key,
    to_auth_scalar,
)
from .wire import SecureChannel, WireError, decode, encode, read_frame


class ClientError(Exception):
    pass


class AuthenticationFailed(ClientError):
    pass


class ServerError(ClientError):
    def __init__(self, code: int):
        self.code = code
        try:
            label = ErrorCode(code).name.lower().replace("_", "-")
        except ValueError:
            label = f"code {code}"
        super().__init__(f"server error: {label}")


class ProtocolError(ClientError):
    pass


def credentials_from_base(
    group: GroupParams, base: BaseKey, kdf_params: KdfParams, user_salt: bytes | None = None
) -> tuple[UserKeyParams, GroupElement, UserKey]:
    """Fresh (or given) user salt -> ``(P_pi, h, K_auth)`` from a base key."""
    p_pi = UserKeyParams.fresh(kdf_params) if user_salt is None else UserKeyParams(kdf_params, user_salt)
    k_auth = derive_user_key(base, p_pi.user_salt)
    return p_pi, group.base_exp(to_auth_scalar(k_auth, group)), k_auth


def make_credentials(
    group: GroupParams,
    password: bytes | str,
    kdf_params: KdfParams,
    cache: BaseKeyCache | None = DEFAULT_CACHE,
) -> tuple[UserKeyParams, GroupElement, UserKey]:
    return credentials_from_base(group, cached_base_key(kdf_params, password, cache), kdf_params)


class Connection:
    """One TCP connection; records every frame it sends and receives."""

    def __init__(self, address: tuple[str, int], group: GroupParams, timeout: float = 30.0):
        self.group = group
        self.sock = socket.create_connection(address, timeout=timeout)
        self.transcript: list[tuple[str, bytes]] = []
        self.channel: SecureChannel | None = None
        self.username: str | None = None
        self.sk: SessionKey | None = None
        self.p_pi: UserKeyParams | None = None

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def send(self, msg: Message) -> None:
        raw = encode(msg)
        self.transcript.append(("send", raw))
        self.sock.sendall(raw)

    def recv(self) -> Message:
        raw = read_frame(self.sock)
        self.transcript.append(("recv", raw))
        return decode(raw)

    def register(self, username: str, p_pi: UserKeyParams, h: GroupElement) -> None:
        self.send(Register(username, p_pi, h.encode()))
        reply = self.recv()
        if isinstance(reply, ErrorReply):
            raise ServerError(reply.code)
        if not isinstance(reply, RegisterOk):
            raise ProtocolError(f"unexpected {type(reply).__name__}")

    def authenticate(
        self,
        username: str,
        password: bytes | str | None = None,
        *,
        pi: int | None = None,
        cache: BaseKeyCache | None = DEFAULT_CACHE,
        rng=None,
    ) -> SessionKey:
        session = PakeClientSession(self.group, username, rng=rng, cache=cache)
        self.send(session.start())
        m2 = self.recv()
        if isinstance(m2, ErrorReply):
            raise ServerError(m2.code)
        if not isinstance(m2, AuthChallenge):
            raise ProtocolError(f"expected challenge, got {type(m2).__name__}")
        self.send(session.on_challenge(m2, password, pi=pi))
        try:
            m4 = self.recv()
        except (WireError, ConnectionError) as exc:
            # The provider signals rejection by hanging up.
            session.fail()
            raise AuthenticationFailed("authentication failed") from exc
        if isinstance(m4, ErrorReply):
            raise ServerError(m4.code)
        if not isinstance(m4, AuthConfirm):
            raise ProtocolError(f"expected confirmation, got {type(m4).__name__}")
        self.sk = session.on_confirm(m4)
        c2s, s2c = channel_keys(self.sk)
        self.channel = SecureChannel(send_key=c2s, recv_key=s2c)
        self.username = session.username
        self.p_pi = session.p_pi
        return self.sk

    def request(self, msg: Message) -> Message:
        if self.channel is None:
            raise ProtocolError("not authenticated")
        raw = self.channel.seal(msg)
        self.transcript.append(("send", raw))
        self.sock.sendall(raw)
        raw = read_frame(self.sock)
        self.transcript.append(("recv", raw))
        reply = self.channel.open(raw)
        if isinstance(reply, ErrorReply):
            raise ServerError(reply.code)
        return reply

    def get_blob(self) -> tuple[int, bytes]:
        reply = self.request(GetBlob())
        if not isinstance(reply, BlobData):
            raise ProtocolError(f"expected blob, got {type(reply).__name__}")
        return reply.version, reply.blob

    def put_blob(self, version: int, blob: bytes) -> None:
        if not isinstance(self.request(PutBlob(version, blob)), Ok):
            raise ProtocolError("put not acknowledged")

    def change_credentials(self, p_pi: UserKeyParams, h: GroupElement) -> None:
        if not isinstance(self.request(ChangeCredentials(p_pi, h.encode())), Ok):
            raise ProtocolError("credential change not acknowledged")

    def reset_begin(self) -> str:
        reply = self.request(ResetBegin())
        if not isinstance(reply, ResetToken):
            raise ProtocolError(f"expected reset token, got {type(reply).__name__}")
        return reply.token


def register(
    address,
    group: GroupParams,
    username: str,
    password: bytes | str,
    kdf_params: KdfParams,
    cache: BaseKeyCache | None = DEFAULT_CACHE,
) -> UserKeyParams:
    p_pi, h, _ = make_credentials(group, password, kdf_params, cache)
    with Connection(address, group) as conn:
        conn.register(username, p_pi, h)
    return p_pi


def login(
    address, group: GroupParams, username: str, password: bytes | str | None = None, **kw
) -> Connection:
    """Authenticate and return the open connection with its sealed channel."""
    conn = Connection(address, group)
    try:
        conn.authenticate(username, password, **kw)
    except BaseException:
        conn.close()
        raise
    return conn
