import pytest

import oracle
from authstore.group import TEST_256, TOY
from authstore.stretch import (
    BaseKey,
    BaseKeyCache,
    CostOutOfRange,
    EmptyPassword,
    KdfAlgorithm,
    KdfParams,
    UnsupportedAlgorithm,
    UserKey,
    UserKeyParams,
    cached_base_key,
    derive_base_key,
    derive_user_key,
    kdf_evaluations,
    to_auth_scalar,
    user_key_from_password,
)

ZERO_SALT = bytes(16)

# Frozen from tests/oracle.py.
KDF_T1 = "ad90f4a39d185560b4dc7b829f2e6f45c931ae0c75cd4b24d4e7896f5eeb106d"
KDF_T3 = "09ee3b367146eebba6626c2c6cb11c873bf126c896810e6f98e4ea448eef22b3"
USER_KEY = "83a5f373273a57399cf1b699448d1d271e167d439a1d36ddd20fdd8dfe08a1e0"


def test_iterated_kdf_golden():
    assert derive_base_key(KdfParams.test_iterated(1, ZERO_SALT), "pw").bytes.hex() == KDF_T1
    assert derive_base_key(KdfParams.test_iterated(3, ZERO_SALT), b"pw").bytes.hex() == KDF_T3
    assert oracle.kdf_test(ZERO_SALT, b"pw", 3).hex() == KDF_T3


def test_user_key_golden():
    uk = derive_user_key(BaseKey(b"\x11" * 32), b"\x22" * 16)
    assert uk.bytes.hex() == USER_KEY
    assert oracle.h256("AS-userkey", b"\x11" * 32, b"\x22" * 16).hex() == USER_KEY


def test_auth_scalar_golden_and_range():
    assert to_auth_scalar(UserKey(b"\x33" * 32), TOY) == 5
    for i in range(300):
        pi = to_auth_scalar(UserKey(bytes([i % 256]) * 31 + bytes([i // 256])), TOY)
        assert 1 <= pi < TOY.q


def test_argon2id_is_deterministic_and_salted():
    p = KdfParams.memory_hard(mem_cost=64, time_cost=1, salt=ZERO_SALT)
    a = derive_base_key(p, "pw")
    assert a == derive_base_key(p, "pw")
    assert a != derive_base_key(p.with_fresh_salt(), "pw")
    assert a != derive_base_key(p, "pW")


def test_params_encoding_round_trip():
    p = KdfParams.memory_hard(mem_cost=1024, time_cost=2, parallelism=4)
    blob = p.encode()
    assert len(blob) == 29
    assert KdfParams.decode(blob) == p
    u = UserKeyParams.fresh(p)
    assert len(u.encode()) == 45
    assert UserKeyParams.decode(u.encode()) == u


def test_params_encoding_layout():
    p = KdfParams(KdfAlgorithm.MEMORY_HARD, b"\xaa" * 16, time_cost=3, mem_cost=65536, parallelism=1)
    assert p.encode().hex() == "01" + "aa" * 16 + "00010000" + "00000003" + "00000001"


def test_validation_errors():
    with pytest.raises(EmptyPassword):
        derive_base_key(KdfParams.test_iterated(), "")
    with pytest.raises(CostOutOfRange):
        derive_base_key(KdfParams.memory_hard(mem_cost=4, time_cost=1), "pw")
    with pytest.raises(CostOutOfRange):
        derive_base_key(KdfParams.test_iterated(0), "pw")
    with pytest.raises(UnsupportedAlgorithm):
        KdfParams.decode(b"\x09" + bytes(28))
    with pytest.raises(ValueError):
        KdfParams.decode(bytes(28))


def test_cache_hit_skips_kdf():
    cache = BaseKeyCache()
    p = KdfParams.test_iterated(5)
    before = kdf_evaluations()
    k1 = cached_base_key(p, "pw", cache)
    k2 = cached_base_key(p, "pw", cache)
    assert k1 == k2
    assert kdf_evaluations() - before == 1
    cached_base_key(p, "other", cache)
    assert kdf_evaluations() - before == 2
    assert cache.most_recent() == (p, derive_base_key(p, "other"))


def test_cache_yields_distinct_user_keys_from_one_base():
    cache = BaseKeyCache()
    base = KdfParams.test_iterated(5)
    before = kdf_evaluations()
    keys = {user_key_from_password(UserKeyParams.fresh(base), "pw", cache) for _ in range(20)}
    assert kdf_evaluations() - before == 1
    assert len(keys) == 20


def test_fresh_salts_are_distinct():
    base = KdfParams.test_iterated()
    assert len({UserKeyParams.fresh(base).user_salt for _ in range(100)}) == 100
    assert len({KdfParams.test_iterated().salt for _ in range(100)}) == 100


def test_keys_do_not_leak_through_repr():
    uk = derive_user_key(BaseKey(b"\x11" * 32), b"\x22" * 16)
    assert USER_KEY not in repr(uk)
    assert "redacted" in repr(uk)


def test_cache_never_stores_the_password():
    sentinel = "SENTINEL-pw-7f3a"
    cache = BaseKeyCache()
    cached_base_key(KdfParams.test_iterated(), sentinel, cache)
    dump = repr(cache._entries).encode() + b"".join(k for k in cache._entries)
    assert sentinel.encode() not in dump


def test_scalar_depends_on_group():
    uk = UserKey(b"\x33" * 32)
    assert to_auth_scalar(uk, TEST_256) != to_auth_scalar(uk, TOY)
    assert to_auth_scalar(uk, TEST_256) == oracle.h2s(TEST_256.q, "AS-pi", [uk.bytes], nonzero=True)
