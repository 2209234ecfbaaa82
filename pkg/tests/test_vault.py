import os
import time

import pytest

from authstore.stretch import BaseKeyCache, KdfParams, UserKeyParams, kdf_evaluations
from authstore.vault import (
    HEADER_LEN,
    CorruptVault,
    CredentialKind,
    CredentialRecord,
    DuplicateRecord,
    NotFound,
    VaultDocument,
    VaultLocked,
    deserialize_records,
    load_vault,
    save_vault,
    serialize_records,
    vault_change_password,
    vault_create,
    vault_open,
)

KDF = KdfParams.test_iterated(5)
SENTINEL = b"SENTINEL-site-pw-4d21"


def filled(password="master", n=3, cache=None):
    doc = vault_create(password, KDF, cache)
    h = vault_open(doc, password, cache)
    for i in range(n):
        h.add_record(CredentialRecord(f"site{i}.example", f"user{i}", f"secret-{i}".encode()))
    return h.to_document()


def test_header_layout():
    raw = vault_create("pw", KDF, None).to_bytes()
    assert raw[:5] == b"AVLT\x01"
    assert HEADER_LEN == 126
    assert len(raw) > HEADER_LEN
    assert VaultDocument.from_bytes(raw).to_bytes() == raw


def test_create_open_add_get():
    doc = filled()
    h = vault_open(doc, "master", None)
    assert h.get_record("site1.example").secret == b"secret-1"
    assert h.get_record("site1.example", "user1").login == "user1"
    with pytest.raises(NotFound):
        h.get_record("nowhere")
    with pytest.raises(DuplicateRecord):
        h.add_record(CredentialRecord("site1.example", "user1", b"x"))
    h.add_record(CredentialRecord("site1.example", "user1", b"x"), replace=True)
    assert h.get_record("site1.example", "user1").secret == b"x"
    h.remove_record("site1.example", "user1")
    with pytest.raises(NotFound):
        h.remove_record("site1.example", "user1")


def test_wrong_password_is_locked():
    with pytest.raises(VaultLocked):
        vault_open(filled(), "Master", None)


def test_hundred_records_round_trip(tmp_path):
    doc = vault_create("pw", KDF, None)
    h = vault_open(doc, "pw", None)
    recs = [CredentialRecord(f"s{i:03d}", "me", os.urandom(20)) for i in range(100)]
    for r in reversed(recs):
        h.add_record(r)
    path = tmp_path / "v" / "vault.avlt"
    save_vault(path, h.to_document())
    again = vault_open(load_vault(path), "pw", None)
    assert again.list_records() == recs


def test_record_serialization_is_sorted_and_canonical():
    a = CredentialRecord("b.example", "x", b"1")
    b = CredentialRecord("a.example", "y", b"2")
    blob = serialize_records([a, b])
    assert blob == serialize_records([b, a])
    assert deserialize_records(blob) == [b, a]
    with pytest.raises(CorruptVault):
        deserialize_records(blob + b"\x00")
    with pytest.raises(CorruptVault):
        deserialize_records(blob[:-1])


def test_user_key_cache_record():
    params = UserKeyParams.fresh(KDF)
    r = CredentialRecord("auth.example", "alice", b"\x07" * 32, CredentialKind.USER_KEY_CACHE, params)
    assert deserialize_records(serialize_records([r])) == [r]
    with pytest.raises(ValueError):
        CredentialRecord("auth.example", "alice", b"short", CredentialKind.USER_KEY_CACHE, params)


def test_change_password_reuses_payload():
    doc = filled("old")
    new = vault_change_password(doc, "old", "new", KDF, None)
    assert new.payload == doc.payload and new.payload_nonce == doc.payload_nonce
    assert new.data_params.u_params != doc.data_params.u_params
    with pytest.raises(VaultLocked):
        vault_open(new, "old", None)
    assert vault_open(new, "new", None).get_record("site0.example").secret == b"secret-0"
    with pytest.raises(VaultLocked):
        vault_change_password(doc, "wrong", "new", KDF, None)


def test_rewrap_of_large_vault_is_fast():
    cache = BaseKeyCache()
    doc = vault_create("old", KDF, cache)
    h = vault_open(doc, "old", cache)
    h.add_record(CredentialRecord("bulk", "me", os.urandom(10 * 1024 * 1024)))
    doc = h.to_document()
    vault_change_password(doc, "old", "new", KDF, cache)  # warm-up
    start = time.perf_counter()
    new = vault_change_password(doc, "old", "new2", KDF, cache)
    elapsed = time.perf_counter() - start
    assert new.payload is doc.payload
    assert elapsed < 0.05, elapsed


def test_unchanged_handle_does_not_reseal():
    doc = filled()
    h = vault_open(doc, "master", None)
    assert h.to_document() is doc


def test_tampering_detected():
    raw = bytearray(filled().to_bytes())
    for offset in (50, 70, 100, HEADER_LEN + 3):
        bad = bytearray(raw)
        bad[offset] ^= 1
        with pytest.raises((VaultLocked, CorruptVault)):
            vault_open(VaultDocument.from_bytes(bytes(bad)), "master", None)
    with pytest.raises(CorruptVault):
        VaultDocument.from_bytes(bytes(raw[:-1]))
    with pytest.raises(CorruptVault):
        VaultDocument.from_bytes(b"XXXX" + bytes(raw[4:]))


def test_secrets_never_in_plain_bytes(tmp_path):
    doc = vault_create("master", KDF, None)
    h = vault_open(doc, "master", None)
    h.add_record(CredentialRecord("site.example", "me", SENTINEL))
    path = tmp_path / "vault.avlt"
    save_vault(path, h.to_document())
    blob = path.read_bytes()
    assert SENTINEL not in blob and b"master" not in blob and b"site.example" not in blob


def test_cache_avoids_second_kdf():
    cache = BaseKeyCache()
    doc = vault_create("pw", KDF, cache)
    before = kdf_evaluations()
    vault_open(doc, "pw", cache)
    assert kdf_evaluations() == before
