"""Prime-order subgroup arithmetic over safe-prime moduli.

Elements live in the subgroup of quadratic residues modulo a safe prime
``p = 2q + 1``; that subgroup has prime order ``q``, so membership is the
single check ``v^q == 1 (mod p)``.  Scalars are plain ``int`` values in
``[0, q)``.

Arithmetic uses Python's built-in ``pow`` and is not constant time.
"""

from __future__ import annotations

import enum
import secrets
from dataclasses import dataclass
from functools import cached_property

from .hashing import labeled_xof


class GroupError(ValueError):
    """Base class for element decoding failures."""


class WrongLength(GroupError):
    pass


class OutOfRange(GroupError):
    pass


class NotInSubgroup(GroupError):
    pass


_SMALL_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47)


def is_probable_prime(n: int, rounds: int = 32) -> bool:
    """Miller-Rabin with the first fifteen primes as fixed bases plus random ones."""
    if n < 2:
        return False
    for sp in _SMALL_PRIMES:
        if n % sp == 0:
            return n == sp
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    bases = list(_SMALL_PRIMES) + [secrets.randbelow(n - 3) + 2 for _ in range(rounds)]
    for a in bases:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class GroupParams:
    name: str
    p: int
    q: int
    g: int

    @cached_property
    def encoded_len(self) -> int:
        return (self.p.bit_length() + 7) // 8

    @cached_property
    def scalar_len(self) -> int:
        return (self.q.bit_length() + 7) // 8

    def check(self) -> None:
        """Verify the safe-prime structure and the generator; raises ValueError."""
        if self.p != 2 * self.q + 1:
            raise ValueError(f"{self.name}: p != 2q + 1")
        if not (is_probable_prime(self.q) and is_probable_prime(self.p)):
            raise ValueError(f"{self.name}: p or q is not prime")
        if self.g in (0, 1) or pow(self.g, self.q, self.p) != 1:
            raise ValueError(f"{self.name}: g does not generate the order-q subgroup")

    @property
    def generator(self) -> GroupElement:
        return GroupElement(self, self.g)

    @property
    def identity(self) -> GroupElement:
        return GroupElement(self, 1)

    def element(self, value: int) -> GroupElement:
        """Wrap an integer, checking range and subgroup membership."""
        if not 1 <= value <= self.p - 1:
            raise OutOfRange(f"element {value} outside [1, p-1]")
        if pow(value, self.q, self.p) != 1:
            raise NotInSubgroup("element is not a quadratic residue")
        return GroupElement(self, value)

    def decode(self, data: bytes) -> GroupElement:
        return validate_element(self, data)

    def base_exp(self, e: int) -> GroupElement:
        return GroupElement(self, pow(self.g, e % self.q, self.p))

    def random_scalar(self, rng=None) -> int:
        """Uniform scalar in ``[1, q-1]``.  ``rng`` needs a ``randrange`` method."""
        if rng is None:
            return secrets.randbelow(self.q - 1) + 1
        return rng.randrange(1, self.q)

    def encode_scalar(self, e: int) -> bytes:
        return (e % self.q).to_bytes(self.scalar_len, "big")


@dataclass(frozen=True)
class GroupElement:
    group: GroupParams
    value: int

    def __mul__(self, other: GroupElement) -> GroupElement:
        return GroupElement(self.group, self.value * other.value % self.group.p)

    def __pow__(self, e: int) -> GroupElement:
        return exp(self, e)

    def inverse(self) -> GroupElement:
        return GroupElement(self.group, pow(self.value, -1, self.group.p))

    def encode(self) -> bytes:
        return self.value.to_bytes(self.group.encoded_len, "big")

    def __repr__(self) -> str:
        return f"GroupElement({self.group.name}, {self.value:#x})"


def exp(base: GroupElement, e: int) -> GroupElement:
    grp = base.group
    return GroupElement(grp, pow(base.value, e % grp.q, grp.p))


def validate_element(group: GroupParams, data: bytes) -> GroupElement:
    """Decode a fixed-length big-endian encoding into a subgroup element."""
    if len(data) != group.encoded_len:
        raise WrongLength(f"expected {group.encoded_len} bytes, got {len(data)}")
    return group.element(int.from_bytes(data, "big"))


def hash_to_scalar(
    group: GroupParams, label: str, fields: list[bytes], *, nonzero: bool = False
) -> int:
    """Hash framed fields to an integer mod q.

    The digest is twice the bit width of q so the modular reduction bias is
    negligible.  With ``nonzero`` a zero result is re-hashed with a 4-byte
    retry counter appended as an extra field.
    """
    if not label:
        raise ValueError("label must be nonempty")
    width = (2 * group.q.bit_length() + 7) // 8
    counter = 0
    while True:
        extra = [counter.to_bytes(4, "big")] if counter else []
        value = int.from_bytes(labeled_xof(label, [*fields, *extra], width), "big") % group.q
        if value or not nonzero:
            return value
        counter += 1


def hash_to_element(group: GroupParams, label: str, fields: list[bytes]) -> GroupElement:
    """Map framed fields to a non-identity subgroup element of unknown discrete log.

    A wide digest is reduced mod p and squared, which lands in the
    quadratic-residue subgroup without exposing an exponent.
    """
    width = (group.p.bit_length() + 128 + 7) // 8
    counter = 0
    while True:
        extra = [counter.to_bytes(4, "big")] if counter else []
        u = int.from_bytes(labeled_xof(label, [*fields, *extra], width), "big") % group.p
        v = u * u % group.p
        if v > 1:
            return GroupElement(group, v)
        counter += 1


class Direction(str, enum.Enum):
    SERVER = "server"
    CLIENT = "client"


def blind_mask(
    group: GroupParams, key_material: bytes, direction: Direction, context: tuple[str, str]
) -> GroupElement:
    a, b = context
    return hash_to_element(
        group,
        "AS-blind-" + Direction(direction).value,
        [a.encode("utf-8"), b.encode("utf-8"), key_material],
    )


def blind_encrypt(
    group: GroupParams,
    key_material: bytes,
    direction: Direction,
    context: tuple[str, str],
    m: GroupElement,
) -> GroupElement:
    """Blind ``m`` by a key-derived mask: ``c = m * M(key, direction, A, B)``.

    Every ciphertext decrypts to some valid element under every key, so a
    guessed key can never be rejected by looking at the plaintext alone.
    """
    return m * blind_mask(group, key_material, direction, context)


def blind_decrypt(
    group: GroupParams,
    key_material: bytes,
    direction: Direction,
    context: tuple[str, str],
    c: GroupElement,
) -> GroupElement:
    return c * blind_mask(group, key_material, direction, context).inverse()


TOY = GroupParams("toy", p=23, q=11, g=4)

_TEST_256_P = 0xB5CED9B2A55EE8755E7B16ECD29389A53232D7EEECF78AC99FDF7D9C22866A47
TEST_256 = GroupParams("test-256", p=_TEST_256_P, q=(_TEST_256_P - 1) // 2, g=4)

# RFC 3526 group 14; p = 7 mod 8 makes 2 a quadratic residue.
_MODP_2048_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1"
    "29024E088A67CC74020BBEA63B139B22514A08798E3404DD"
    "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245"
    "E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D"
    "C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F"
    "83655D23DCA3AD961C62F356208552BB9ED529077096966D"
    "670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9"
    "DE2BCBF6955817183995497CEA956AE515D2261898FA0510"
    "15728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)
MODP_2048 = GroupParams("modp-2048", p=_MODP_2048_P, q=(_MODP_2048_P - 1) // 2, g=2)

PROFILES = {grp.name: grp for grp in (TOY, TEST_256, MODP_2048)}


def get_profile(name: str) -> GroupParams:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown group profile {name!r}; choose from {sorted(PROFILES)}") from None
