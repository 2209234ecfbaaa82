"""Password-protected credential vault with a one-level key chain.

Records are sealed under a random ``k_sym``; ``k_sym`` itself is sealed
under a data user key derived from the password.  Changing the password
rewraps ``k_sym`` and leaves the payload ciphertext untouched.

File layout (all integers big-endian)::

    "AVLT" | version (1) | KDF params (29) | user salt (16)
    wrap nonce (12) | wrapped k_sym (48) | payload nonce (12)
    payload length (4) | sealed payload
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .stretch import (
    DEFAULT_CACHE,
    KDF_PARAMS_LEN,
    KEY_LEN,
    SALT_LEN,
    USER_KEY_PARAMS_LEN,
    BaseKeyCache,
    KdfParams,
    UserKeyParams,
    user_key_from_password,
)

MAGIC = b"AVLT"
HEADER_VERSION = 1
PAYLOAD_VERSION = 1
NONCE_LEN = 12
WRAPPED_LEN = KEY_LEN + 16
HEADER_LEN = 4 + 1 + KDF_PARAMS_LEN + SALT_LEN + NONCE_LEN + WRAPPED_LEN + NONCE_LEN + 4
_PAYLOAD_AAD = b"AVLT-payload"


class VaultError(Exception):
    pass


class VaultLocked(VaultError):
    """The password (or its parameters) does not unwrap the vault key."""


class CorruptVault(VaultError):
    pass


class DuplicateRecord(VaultError):
    pass


class NotFound(VaultError, KeyError):
    pass


class CredentialKind(enum.IntEnum):
    WEB_PASSWORD = 1
    USER_KEY_CACHE = 2


@dataclass(frozen=True)
class CredentialRecord:
    site: str
    login: str
    secret: bytes
    kind: CredentialKind = CredentialKind.WEB_PASSWORD
    user_key_params: UserKeyParams | None = None

    def __post_init__(self):
        if self.kind is CredentialKind.USER_KEY_CACHE:
            if self.user_key_params is None or len(self.secret) != KEY_LEN:
                raise ValueError("user-key records need a 32-byte key and its parameters")

    @property
    def sort_key(self) -> tuple[str, str]:
        return self.site, self.login


@dataclass(frozen=True)
class DataParams:
    u_params: UserKeyParams
    wrap_nonce: bytes
    wrapped_key: bytes


@dataclass(frozen=True)
class VaultDocument:
    data_params: DataParams
    payload_nonce: bytes
    payload: bytes

    def to_bytes(self) -> bytes:
        dp = self.data_params
        return b"".join(
            [
                MAGIC,
                bytes([HEADER_VERSION]),
                dp.u_params.encode(),
                dp.wrap_nonce,
                dp.wrapped_key,
                self.payload_nonce,
                struct.pack(">I", len(self.payload)),
                self.payload,
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> VaultDocument:
        if len(data) < HEADER_LEN or data[:4] != MAGIC:
            raise CorruptVault("not a vault file")
        if data[4] != HEADER_VERSION:
            raise CorruptVault(f"unsupported vault header version {data[4]}")
        pos = 5
        try:
            u_params = UserKeyParams.decode(data[pos : pos + USER_KEY_PARAMS_LEN])
        except ValueError as exc:
            raise CorruptVault(f"bad key parameters: {exc}") from exc
        pos += USER_KEY_PARAMS_LEN
        wrap_nonce = data[pos : pos + NONCE_LEN]
        pos += NONCE_LEN
        wrapped = data[pos : pos + WRAPPED_LEN]
        pos += WRAPPED_LEN
        payload_nonce = data[pos : pos + NONCE_LEN]
        pos += NONCE_LEN
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if len(data) - pos != n:
            raise CorruptVault("payload length mismatch")
        return cls(DataParams(u_params, wrap_nonce, wrapped), payload_nonce, data[pos:])


def _wrap_aad(u_params: UserKeyParams) -> bytes:
    return MAGIC + bytes([HEADER_VERSION]) + u_params.encode()


def _lp(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def serialize_records(records) -> bytes:
    """Count-prefixed, length-prefixed fields, sorted by ``(site, login)``."""
    ordered = sorted(records, key=lambda r: r.sort_key)
    out = bytearray([PAYLOAD_VERSION]) + struct.pack(">I", len(ordered))
    for r in ordered:
        params = r.user_key_params.encode() if r.user_key_params else b""
        out += _lp(r.site.encode("utf-8")) + _lp(r.login.encode("utf-8")) + _lp(r.secret)
        out += bytes([r.kind]) + _lp(params)
    return bytes(out)


def deserialize_records(data: bytes) -> list[CredentialRecord]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CorruptVault("truncated record list")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    def field() -> bytes:
        (n,) = struct.unpack(">I", take(4))
        return take(n)

    if take(1)[0] != PAYLOAD_VERSION:
        raise CorruptVault("unsupported payload version")
    (count,) = struct.unpack(">I", take(4))
    records = []
    try:
        for _ in range(count):
            site = field().decode("utf-8")
            login = field().decode("utf-8")
            secret = field()
            kind = CredentialKind(take(1)[0])
            raw_params = field()
            params = UserKeyParams.decode(raw_params) if raw_params else None
            records.append(CredentialRecord(site, login, secret, kind, params))
    except ValueError as exc:
        raise CorruptVault(f"bad record: {exc}") from exc
    if pos != len(data):
        raise CorruptVault("trailing bytes in record list")
    return records


def _seal_payload(k_sym: bytes, records) -> tuple[bytes, bytes]:
    nonce = os.urandom(NONCE_LEN)
    return nonce, AESGCM(k_sym).encrypt(nonce, serialize_records(records), _PAYLOAD_AAD)


def _wrap(k_sym: bytes, u_params: UserKeyParams, password, cache) -> DataParams:
    k_data = user_key_from_password(u_params, password, cache)
    nonce = os.urandom(NONCE_LEN)
    wrapped = AESGCM(k_data.bytes).encrypt(nonce, k_sym, _wrap_aad(u_params))
    return DataParams(u_params, nonce, wrapped)


def _unwrap(dp: DataParams, password, cache) -> bytes:
    k_data = user_key_from_password(dp.u_params, password, cache)
    try:
        k_sym = AESGCM(k_data.bytes).decrypt(dp.wrap_nonce, dp.wrapped_key, _wrap_aad(dp.u_params))
    except InvalidTag:
        raise VaultLocked("wrong password for this vault") from None
    if len(k_sym) != KEY_LEN:
        raise CorruptVault("unwrapped key has the wrong length")
    return k_sym


class VaultHandle:
    """An unlocked vault.  Single owner; not thread-safe."""

    def __init__(self, document: VaultDocument, k_sym: bytes, records: list[CredentialRecord]):
        self._document = document
        self._k_sym = k_sym
        self._records = {r.sort_key: r for r in records}
        self._dirty = False

    @property
    def data_params(self) -> DataParams:
        return self._document.data_params

    def add_record(self, record: CredentialRecord, *, replace: bool = False) -> None:
        if record.sort_key in self._records and not replace:
            raise DuplicateRecord(f"{record.site} / {record.login}")
        self._records[record.sort_key] = record
        self._dirty = True

    def get_record(self, site: str, login: str | None = None) -> CredentialRecord:
        if login is not None:
            try:
                return self._records[(site, login)]
            except KeyError:
                raise NotFound(f"{site} / {login}") from None
        matches = [r for key, r in sorted(self._records.items()) if key[0] == site]
        if not matches:
            raise NotFound(site)
        return matches[0]

    def remove_record(self, site: str, login: str) -> None:
        try:
            del self._records[(site, login)]
        except KeyError:
            raise NotFound(f"{site} / {login}") from None
        self._dirty = True

    def list_records(self) -> list[CredentialRecord]:
        return [self._records[k] for k in sorted(self._records)]

    def to_document(self) -> VaultDocument:
        """Current document; the payload is re-sealed only if records changed."""
        if self._dirty:
            nonce, payload = _seal_payload(self._k_sym, self._records.values())
            self._document = VaultDocument(self._document.data_params, nonce, payload)
            self._dirty = False
        return self._document


def vault_create(
    password: bytes | str, kdf_params: KdfParams, cache: BaseKeyCache | None = DEFAULT_CACHE
) -> VaultDocument:
    k_sym = os.urandom(KEY_LEN)
    dp = _wrap(k_sym, UserKeyParams.fresh(kdf_params), password, cache)
    nonce, payload = _seal_payload(k_sym, [])
    return VaultDocument(dp, nonce, payload)


def vault_open(
    document: VaultDocument, password: bytes | str, cache: BaseKeyCache | None = DEFAULT_CACHE
) -> VaultHandle:
    k_sym = _unwrap(document.data_params, password, cache)
    try:
        plain = AESGCM(k_sym).decrypt(document.payload_nonce, document.payload, _PAYLOAD_AAD)
    except InvalidTag:
        raise CorruptVault("payload failed authentication") from None
    return VaultHandle(document, k_sym, deserialize_records(plain))


def vault_change_password(
    document: VaultDocument,
    old_password: bytes | str,
    new_password: bytes | str,
    new_kdf_params: KdfParams,
    cache: BaseKeyCache | None = DEFAULT_CACHE,
) -> VaultDocument:
    """Rewrap ``k_sym`` under a new password; the payload bytes are reused as-is."""
    k_sym = _unwrap(document.data_params, old_password, cache)
    dp = _wrap(k_sym, UserKeyParams.fresh(new_kdf_params), new_password, cache)
    return VaultDocument(dp, document.payload_nonce, document.payload)


def load_vault(path: str | os.PathLike) -> VaultDocument:
    return VaultDocument.from_bytes(Path(path).read_bytes())


def save_vault(path: str | os.PathLike, document: VaultDocument) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(document.to_bytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
