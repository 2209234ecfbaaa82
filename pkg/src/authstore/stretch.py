"""Password stretching and user-key derivation.

One expensive KDF evaluation turns a password into a base key; any number
of cheap per-purpose user keys are then hashed out of it with fresh salts::

    base = KDF(kdf_params, password)
    user_key = H("AS-userkey", base, user_salt)

Base keys are cached in process memory so that a second derivation with the
same KDF parameters and password is free.  Nothing here writes to disk.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
import struct
import threading
from dataclasses import dataclass, field, replace

from cryptography.hazmat.primitives.kdf.argon2 import Argon2id

from .group import GroupParams, hash_to_scalar
from .hashing import labeled_hash

SALT_LEN = 16
KEY_LEN = 32
KDF_PARAMS_LEN = 29
USER_KEY_PARAMS_LEN = KDF_PARAMS_LEN + SALT_LEN

MIN_MEM_KIB = 8
MAX_MEM_KIB = 4 * 1024 * 1024
MAX_TIME_COST = 1 << 20
MAX_PARALLELISM = 64

DEFAULT_MEM_KIB = 64 * 1024
DEFAULT_TIME_COST = 3
DEFAULT_PARALLELISM = 1


class KdfError(ValueError):
    pass


class EmptyPassword(KdfError):
    pass


class UnsupportedAlgorithm(KdfError):
    pass


class CostOutOfRange(KdfError):
    pass


class KdfAlgorithm(enum.IntEnum):
    MEMORY_HARD = 1  # Argon2id
    TEST_ITERATED = 2  # iterated SHA-256, cheap and oracle-friendly


@dataclass(frozen=True)
class KdfParams:
    """Salt and cost parameters for the base-key KDF."""

    algorithm: KdfAlgorithm
    salt: bytes
    time_cost: int
    mem_cost: int = 0
    parallelism: int = 0

    def __post_init__(self):
        if len(self.salt) != SALT_LEN:
            raise ValueError(f"salt must be {SALT_LEN} bytes")

    @classmethod
    def memory_hard(
        cls,
        mem_cost: int = DEFAULT_MEM_KIB,
        time_cost: int = DEFAULT_TIME_COST,
        parallelism: int = DEFAULT_PARALLELISM,
        salt: bytes | None = None,
    ) -> KdfParams:
        salt = os.urandom(SALT_LEN) if salt is None else salt
        return cls(KdfAlgorithm.MEMORY_HARD, salt, time_cost, mem_cost, parallelism)

    @classmethod
    def test_iterated(cls, time_cost: int = 1, salt: bytes | None = None) -> KdfParams:
        salt = os.urandom(SALT_LEN) if salt is None else salt
        return cls(KdfAlgorithm.TEST_ITERATED, salt, time_cost)

    def validate(self) -> None:
        if self.algorithm not in (KdfAlgorithm.MEMORY_HARD, KdfAlgorithm.TEST_ITERATED):
            raise UnsupportedAlgorithm(f"unknown KDF algorithm {self.algorithm}")
        if not 1 <= self.time_cost <= MAX_TIME_COST:
            raise CostOutOfRange(f"time_cost {self.time_cost} out of range")
        if self.algorithm is KdfAlgorithm.TEST_ITERATED:
            if self.mem_cost or self.parallelism:
                raise CostOutOfRange("test-iterated parameters carry no memory or lane cost")
        else:
            if not 1 <= self.parallelism <= MAX_PARALLELISM:
                raise CostOutOfRange(f"parallelism {self.parallelism} out of range")
            if not max(MIN_MEM_KIB, 8 * self.parallelism) <= self.mem_cost <= MAX_MEM_KIB:
                raise CostOutOfRange(f"mem_cost {self.mem_cost} KiB out of range")

    def encode(self) -> bytes:
        return struct.pack(">B16sIII", self.algorithm, self.salt, self.mem_cost, self.time_cost, self.parallelism)

    @classmethod
    def decode(cls, data: bytes) -> KdfParams:
        if len(data) != KDF_PARAMS_LEN:
            raise ValueError(f"KdfParams encoding must be {KDF_PARAMS_LEN} bytes")
        alg, salt, mem, time_cost, par = struct.unpack(">B16sIII", data)
        try:
            algorithm = KdfAlgorithm(alg)
        except ValueError:
            raise UnsupportedAlgorithm(f"unknown KDF algorithm id {alg}") from None
        return cls(algorithm, salt, time_cost, mem, par)

    def with_fresh_salt(self) -> KdfParams:
        return replace(self, salt=os.urandom(SALT_LEN))


@dataclass(frozen=True)
class UserKeyParams:
    base: KdfParams
    user_salt: bytes

    def __post_init__(self):
        if len(self.user_salt) != SALT_LEN:
            raise ValueError(f"user_salt must be {SALT_LEN} bytes")

    @classmethod
    def fresh(cls, base: KdfParams) -> UserKeyParams:
        return cls(base, os.urandom(SALT_LEN))

    def encode(self) -> bytes:
        return self.base.encode() + self.user_salt

    @classmethod
    def decode(cls, data: bytes) -> UserKeyParams:
        if len(data) != USER_KEY_PARAMS_LEN:
            raise ValueError(f"UserKeyParams encoding must be {USER_KEY_PARAMS_LEN} bytes")
        return cls(KdfParams.decode(data[:KDF_PARAMS_LEN]), data[KDF_PARAMS_LEN:])


class _Key:
    __slots__ = ("bytes",)

    def __init__(self, data: bytes):
        if len(data) != KEY_LEN:
            raise ValueError(f"{type(self).__name__} must be {KEY_LEN} bytes")
        self.bytes = bytes(data)

    def __eq__(self, other):
        return type(other) is type(self) and hmac.compare_digest(self.bytes, other.bytes)

    def __hash__(self):
        return hash(self.bytes)

    def __repr__(self):
        return f"{type(self).__name__}(<redacted>)"


class BaseKey(_Key):
    """Output of the expensive KDF.  Kept in memory only."""


class UserKey(_Key):
    pass


_counter_lock = threading.Lock()
_kdf_evaluations = 0


def kdf_evaluations() -> int:
    """Process-wide count of base-key KDF runs (a probe for cache tests)."""
    return _kdf_evaluations


def _as_bytes(password: bytes | str) -> bytes:
    return password.encode("utf-8") if isinstance(password, str) else bytes(password)


def derive_base_key(params: KdfParams, password: bytes | str) -> BaseKey:
    global _kdf_evaluations
    pw = _as_bytes(password)
    if not pw:
        raise EmptyPassword("password must be nonempty")
    params.validate()
    with _counter_lock:
        _kdf_evaluations += 1
    if params.algorithm is KdfAlgorithm.TEST_ITERATED:
        key = hashlib.sha256(b"AS-kdf-test" + params.salt + pw).digest()
        for _ in range(params.time_cost - 1):
            key = hashlib.sha256(key).digest()
        return BaseKey(key)
    kdf = Argon2id(
        salt=params.salt,
        length=KEY_LEN,
        iterations=params.time_cost,
        lanes=params.parallelism,
        memory_cost=params.mem_cost,
    )
    return BaseKey(kdf.derive(pw))


def derive_user_key(base: BaseKey, user_salt: bytes) -> UserKey:
    if len(user_salt) != SALT_LEN:
        raise ValueError(f"user_salt must be {SALT_LEN} bytes")
    return UserKey(labeled_hash("AS-userkey", base.bytes, user_salt))


@dataclass
class BaseKeyCache:
    """In-memory base-key cache keyed by ``H("AS-cache", params, password)``.

    Entries are kept in insertion order so the most recent base key can be
    reused for password-less registration.
    """

    _entries: dict[bytes, tuple[KdfParams, BaseKey]] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    @staticmethod
    def _slot(params: KdfParams, password: bytes | str) -> bytes:
        return labeled_hash("AS-cache", params.encode(), _as_bytes(password))

    def lookup(self, params: KdfParams, password: bytes | str) -> BaseKey | None:
        with self._lock:
            hit = self._entries.get(self._slot(params, password))
        return hit[1] if hit else None

    def insert(self, params: KdfParams, password: bytes | str, key: BaseKey) -> None:
        slot = self._slot(params, password)
        with self._lock:
            self._entries.pop(slot, None)
            self._entries[slot] = (params, key)

    def most_recent(self) -> tuple[KdfParams, BaseKey] | None:
        with self._lock:
            if not self._entries:
                return None
            return next(reversed(self._entries.values()))

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()

    def __len__(self):
        return len(self._entries)


DEFAULT_CACHE = BaseKeyCache()


def cached_base_key(
    params: KdfParams, password: bytes | str, cache: BaseKeyCache | None = DEFAULT_CACHE
) -> BaseKey:
    if cache is not None:
        hit = cache.lookup(params, password)
        if hit is not None:
            return hit
    key = derive_base_key(params, password)
    if cache is not None:
        cache.insert(params, password, key)
    return key


def user_key_from_password(
    params: UserKeyParams, password: bytes | str, cache: BaseKeyCache | None = DEFAULT_CACHE
) -> UserKey:
    return derive_user_key(cached_base_key(params.base, password, cache), params.user_salt)


def to_auth_scalar(key: UserKey, group: GroupParams) -> int:
    """Map an authentication user key to a nonzero exponent in ``[1, q-1]``."""
    return hash_to_scalar(group, "AS-pi", [key.bytes], nonzero=True)
