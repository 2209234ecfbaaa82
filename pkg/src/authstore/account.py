"""Provider-side account records and their on-disk store.

``accounts.db`` layout: magic ``ASDB``, a version byte, then records::

    2-byte username length | username (UTF-8)
    user key parameters    (45 bytes: KDF parameters + user salt)
    verifier h             (group encoding length)
    reset flag             (1 byte; 1 means a reset blob follows)
    [ h_temp | 8-byte expiry | 1-byte consumed ]
    8-byte created_at | 8-byte updated_at
    4-byte CRC-32 over the record bytes above
"""

from __future__ import annotations

import os
import secrets
import struct
import threading
import time
import unicodedata
import zlib
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path

from .group import GroupElement, GroupError, GroupParams, hash_to_scalar, validate_element
from .hashing import labeled_hash
from .stretch import SALT_LEN, USER_KEY_PARAMS_LEN, KdfParams, UserKeyParams

MAGIC = b"ASDB"
FORMAT_VERSION = 1
RESET_LIFETIME = 15 * 60
MAX_USERNAME_BYTES = 64


class AccountError(Exception):
    pass


class InvalidUsername(AccountError, ValueError):
    pass


class UserExists(AccountError):
    pass


class UnknownUser(AccountError):
    pass


class InvalidVerifier(AccountError):
    pass


class NotAuthenticated(AccountError):
    pass


class CorruptStore(AccountError):
    pass


def canonical_username(name: str) -> str:
    """NFC-normalise and lowercase; 1-64 UTF-8 bytes, no control characters."""
    if not isinstance(name, str):
        raise InvalidUsername("username must be text")
    canon = unicodedata.normalize("NFC", name).lower()
    size = len(canon.encode("utf-8"))
    if not 1 <= size <= MAX_USERNAME_BYTES:
        raise InvalidUsername(f"username must be 1-{MAX_USERNAME_BYTES} bytes")
    if any(unicodedata.category(ch).startswith("C") for ch in canon):
        raise InvalidUsername("username contains control characters")
    return canon


@dataclass(frozen=True)
class ResetState:
    h_temp: GroupElement
    expires_at: int
    consumed: bool = False

    def live(self, now: float) -> bool:
        return not self.consumed and now < self.expires_at


@dataclass(frozen=True)
class AccountRecord:
    username: str
    p_pi: UserKeyParams
    h: GroupElement
    created_at: int
    updated_at: int
    reset: ResetState | None = None


def decoy_record(group: GroupParams, secret: bytes, username: str, template: KdfParams) -> AccountRecord:
    """Deterministic stand-in for an unknown username.

    Salts and the verifier are derived from the server secret, so repeated
    probes for the same name see stable parameters like a real account.
    """
    seed = labeled_hash("AS-decoy", secret, username.encode("utf-8"))
    p_pi = UserKeyParams(replace(template, salt=seed[:SALT_LEN]), seed[SALT_LEN : 2 * SALT_LEN])
    h = group.base_exp(hash_to_scalar(group, "AS-decoy-h", [secret, username.encode("utf-8")], nonzero=True))
    return AccountRecord(username, p_pi, h, 0, 0)


def encode_record(rec: AccountRecord) -> bytes:
    name = rec.username.encode("utf-8")
    out = bytearray(struct.pack(">H", len(name)) + name)
    out += rec.p_pi.encode()
    out += rec.h.encode()
    if rec.reset is None:
        out += b"\x00"
    else:
        out += b"\x01" + rec.reset.h_temp.encode()
        out += struct.pack(">QB", rec.reset.expires_at, rec.reset.consumed)
    out += struct.pack(">QQ", rec.created_at, rec.updated_at)
    return bytes(out) + struct.pack(">I", zlib.crc32(out))


def encode_store(records) -> bytes:
    body = b"".join(encode_record(r) for r in sorted(records, key=lambda r: r.username))
    return MAGIC + bytes([FORMAT_VERSION]) + body


def decode_store(group: GroupParams, data: bytes) -> dict[str, AccountRecord]:
    if data[:4] != MAGIC:
        raise CorruptStore("bad magic")
    if len(data) < 5 or data[4] != FORMAT_VERSION:
        raise CorruptStore("unsupported store version")
    elen = group.encoded_len
    records: dict[str, AccountRecord] = {}
    pos = 5

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CorruptStore("truncated record")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        start = pos
        try:
            (ulen,) = struct.unpack(">H", take(2))
            username = take(ulen).decode("utf-8")
            p_pi = UserKeyParams.decode(take(USER_KEY_PARAMS_LEN))
            h = validate_element(group, take(elen))
            reset = None
            if take(1) == b"\x01":
                h_temp = validate_element(group, take(elen))
                expires_at, consumed = struct.unpack(">QB", take(9))
                reset = ResetState(h_temp, expires_at, bool(consumed))
            created_at, updated_at = struct.unpack(">QQ", take(16))
            body_end = pos
            (crc,) = struct.unpack(">I", take(4))
        except CorruptStore:
            raise
        except (ValueError, GroupError, struct.error) as exc:
            raise CorruptStore(f"undecodable record at offset {start}: {exc}") from exc
        if zlib.crc32(data[start:body_end]) != crc:
            raise CorruptStore(f"checksum mismatch in record at offset {start}")
        if username in records:
            raise CorruptStore(f"duplicate record for {username!r}")
        records[username] = AccountRecord(username, p_pi, h, created_at, updated_at, reset)
    return records


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}.{threading.get_ident()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class AccountStore:
    """Thread-safe account table with optional file persistence.

    Writes to one account are serialised by a per-account lock; the whole
    table is rewritten atomically (temp file then rename) after each change.
    """

    def __init__(self, group: GroupParams, path: str | os.PathLike | None = None, clock=time.time):
        self.group = group
        self.path = Path(path) if path is not None else None
        self.clock = clock
        self._records: dict[str, AccountRecord] = {}
        self._table_lock = threading.RLock()
        self._account_locks: defaultdict[str, threading.Lock] = defaultdict(threading.Lock)
        if self.path is not None and self.path.exists():
            self._records = decode_store(group, self.path.read_bytes())

    def _lock_for(self, username: str) -> threading.Lock:
        with self._table_lock:
            return self._account_locks[username]

    def _commit(self, rec: AccountRecord) -> None:
        with self._table_lock:
            self._records[rec.username] = rec
            if self.path is not None:
                _atomic_write(self.path, encode_store(self._records.values()))

    def _now(self) -> int:
        return int(self.clock())

    def _verifier(self, h) -> GroupElement:
        try:
            if isinstance(h, GroupElement):
                return self.group.element(h.value)
            return validate_element(self.group, h)
        except GroupError as exc:
            raise InvalidVerifier(str(exc)) from exc

    def get(self, username: str) -> AccountRecord | None:
        with self._table_lock:
            return self._records.get(canonical_username(username))

    def __len__(self):
        return len(self._records)

    def usernames(self) -> list[str]:
        with self._table_lock:
            return sorted(self._records)

    def register(self, username: str, p_pi: UserKeyParams, h) -> AccountRecord:
        name = canonical_username(username)
        verifier = self._verifier(h)
        with self._lock_for(name):
            if self.get(name) is not None:
                raise UserExists(name)
            now = self._now()
            rec = AccountRecord(name, p_pi, verifier, now, now)
            self._commit(rec)
            return rec

    def change_credentials(self, username: str, session, p_pi: UserKeyParams, h) -> AccountRecord:
        """Replace ``(P_pi, h)``; the superseded pair is dropped everywhere.

        ``session`` must be a completed provider-side PAKE session for this
        user (anything exposing ``authenticated_user``).
        """
        name = canonical_username(username)
        if session is None or getattr(session, "authenticated_user", None) != name:
            raise NotAuthenticated(name)
        verifier = self._verifier(h)
        with self._lock_for(name):
            rec = self.get(name)
            if rec is None:
                raise UnknownUser(name)
            rec = replace(rec, p_pi=p_pi, h=verifier, updated_at=self._now(), reset=None)
            self._commit(rec)
            return rec

    def begin_reset(self, username: str, rng=None) -> str:
        """Install a one-time reset verifier; returns the token as hex."""
        name = canonical_username(username)
        with self._lock_for(name):
            rec = self.get(name)
            if rec is None:
                raise UnknownUser(name)
            token = self.group.random_scalar(rng if rng is not None else secrets.SystemRandom())
            now = self._now()
            reset = ResetState(self.group.base_exp(token), now + RESET_LIFETIME)
            self._commit(replace(rec, reset=reset, updated_at=now))
        return self.group.encode_scalar(token).hex()

    def auth_verifier(self, username: str) -> tuple[AccountRecord, GroupElement, bool] | None:
        """Pick the verifier an authentication attempt is checked against.

        A live reset verifier takes precedence over the account's own ``h``;
        the flag reports which one was chosen.
        """
        rec = self.get(username)
        if rec is None:
            return None
        if rec.reset is not None and rec.reset.live(self.clock()):
            return rec, rec.reset.h_temp, True
        return rec, rec.h, False

    def consume_reset(self, username: str, h_temp: GroupElement) -> bool:
        """Mark the reset verifier used; False if it is no longer live."""
        name = canonical_username(username)
        with self._lock_for(name):
            rec = self.get(name)
            if rec is None or rec.reset is None or rec.reset.h_temp != h_temp:
                return False
            if not rec.reset.live(self.clock()):
                return False
            self._commit(replace(rec, reset=replace(rec.reset, consumed=True), updated_at=self._now()))
            return True

    def save(self) -> None:
        if self.path is None:
            raise ValueError("store has no path")
        with self._table_lock:
            _atomic_write(self.path, encode_store(self._records.values()))


def parse_reset_token(group: GroupParams, token: str) -> int:
    try:
        raw = bytes.fromhex(token.strip())
    except ValueError:
        raise ValueError("reset token must be hex") from None
    value = int.from_bytes(raw, "big")
    if not 1 <= value < group.q:
        raise ValueError("reset token out of range")
    return value
