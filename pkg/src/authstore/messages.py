"""Protocol message types.

Group elements travel as their raw fixed-length encodings; receivers
validate them at the point of use, so a tampered byte surfaces as a
protocol failure rather than a decoding failure.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import ClassVar

from .stretch import UserKeyParams


class ErrorCode(enum.IntEnum):
    MALFORMED = 1
    AUTH_FAILED = 2
    RATE_LIMITED = 3
    USER_EXISTS = 4
    INVALID_USERNAME = 5
    INVALID_VERIFIER = 6
    PROTOCOL_ORDER = 7
    VERSION_CONFLICT = 8
    RESET_LOCKDOWN = 9
    NOT_FOUND = 10
    INTERNAL = 11


def _u64(n: int) -> bytes:
    return n.to_bytes(8, "big")


def _int(b: bytes, width: int) -> int:
    if len(b) != width:
        raise ValueError(f"expected {width}-byte integer")
    return int.from_bytes(b, "big")


def _text(b: bytes) -> str:
    return b.decode("utf-8")


class Message:
    TYPE: ClassVar[int]
    NFIELDS: ClassVar[int]

    def to_fields(self) -> list[bytes]:
        raise NotImplementedError

    @classmethod
    def from_fields(cls, fields: list[bytes]) -> Message:
        raise NotImplementedError


@dataclass(frozen=True)
class AuthRequest(Message):
    TYPE = 0x01
    NFIELDS = 1
    username: str

    def to_fields(self):
        return [self.username.encode("utf-8")]

    @classmethod
    def from_fields(cls, f):
        return cls(_text(f[0]))


@dataclass(frozen=True)
class AuthChallenge(Message):
    TYPE = 0x02
    NFIELDS = 4
    provider_id: str
    enc_x: bytes
    p_pi: UserKeyParams
    c: bytes

    def to_fields(self):
        return [self.provider_id.encode("utf-8"), self.enc_x, self.p_pi.encode(), self.c]

    @classmethod
    def from_fields(cls, f):
        return cls(_text(f[0]), f[1], UserKeyParams.decode(f[2]), f[3])


@dataclass(frozen=True)
class AuthResponse(Message):
    TYPE = 0x03
    NFIELDS = 2
    enc_y: bytes
    enc_v: bytes

    def to_fields(self):
        return [self.enc_y, self.enc_v]

    @classmethod
    def from_fields(cls, f):
        return cls(f[0], f[1])


@dataclass(frozen=True)
class AuthConfirm(Message):
    TYPE = 0x04
    NFIELDS = 1
    conf: bytes

    def to_fields(self):
        return [self.conf]

    @classmethod
    def from_fields(cls, f):
        return cls(f[0])


Msg1, Msg2, Msg3, Msg4 = AuthRequest, AuthChallenge, AuthResponse, AuthConfirm


@dataclass(frozen=True)
class Register(Message):
    TYPE = 0x10
    NFIELDS = 4
    username: str
    p_pi: UserKeyParams
    h: bytes
    version: int = 1

    def to_fields(self):
        return [bytes([self.version]), self.username.encode("utf-8"), self.p_pi.encode(), self.h]

    @classmethod
    def from_fields(cls, f):
        return cls(_text(f[1]), UserKeyParams.decode(f[2]), f[3], version=_int(f[0], 1))


@dataclass(frozen=True)
class RegisterOk(Message):
    TYPE = 0x11
    NFIELDS = 0

    def to_fields(self):
        return []

    @classmethod
    def from_fields(cls, f):
        return cls()


@dataclass(frozen=True)
class ErrorReply(Message):
    TYPE = 0x12
    NFIELDS = 1
    code: int

    def to_fields(self):
        return [int(self.code).to_bytes(2, "big")]

    @classmethod
    def from_fields(cls, f):
        return cls(_int(f[0], 2))


@dataclass(frozen=True)
class Channel(Message):
    TYPE = 0x20
    NFIELDS = 2
    seq: int
    sealed: bytes

    def to_fields(self):
        return [_u64(self.seq), self.sealed]

    @classmethod
    def from_fields(cls, f):
        return cls(_int(f[0], 8), f[1])


@dataclass(frozen=True)
class PutBlob(Message):
    TYPE = 0x30
    NFIELDS = 2
    version: int
    blob: bytes

    def to_fields(self):
        return [_u64(self.version), self.blob]

    @classmethod
    def from_fields(cls, f):
        return cls(_int(f[0], 8), f[1])


@dataclass(frozen=True)
class GetBlob(Message):
    TYPE = 0x31
    NFIELDS = 0

    def to_fields(self):
        return []

    @classmethod
    def from_fields(cls, f):
        return cls()


@dataclass(frozen=True)
class BlobData(Message):
    TYPE = 0x32
    NFIELDS = 2
    version: int
    blob: bytes

    def to_fields(self):
        return [_u64(self.version), self.blob]

    @classmethod
    def from_fields(cls, f):
        return cls(_int(f[0], 8), f[1])


@dataclass(frozen=True)
class ChangeCredentials(Message):
    TYPE = 0x33
    NFIELDS = 2
    p_pi: UserKeyParams
    h: bytes

    def to_fields(self):
        return [self.p_pi.encode(), self.h]

    @classmethod
    def from_fields(cls, f):
        return cls(UserKeyParams.decode(f[0]), f[1])


@dataclass(frozen=True)
class ResetBegin(Message):
    TYPE = 0x34
    NFIELDS = 0

    def to_fields(self):
        return []

    @classmethod
    def from_fields(cls, f):
        return cls()


@dataclass(frozen=True)
class ResetToken(Message):
    TYPE = 0x35
    NFIELDS = 1
    token: str

    def to_fields(self):
        return [self.token.encode("ascii")]

    @classmethod
    def from_fields(cls, f):
        return cls(f[0].decode("ascii"))


@dataclass(frozen=True)
class Ok(Message):
    TYPE = 0x36
    NFIELDS = 0

    def to_fields(self):
        return []

    @classmethod
    def from_fields(cls, f):
        return cls()


MESSAGE_TYPES: dict[int, type[Message]] = {
    cls.TYPE: cls
    for cls in (
        AuthRequest, AuthChallenge, AuthResponse, AuthConfirm, Register, RegisterOk,
        ErrorReply, Channel, PutBlob, GetBlob, BlobData, ChangeCredentials,
        ResetBegin, ResetToken, Ok,
    )
}
