"""Domain-separated hashing helpers shared by every module.

All hash inputs are framed as a sequence of 4-byte big-endian length
prefixes followed by the field bytes, with the label as the first field.
"""

from __future__ import annotations

import hashlib
from collections.abc import Iterable


def frame_fields(label: str, fields: Iterable[bytes]) -> bytes:
    parts = [label.encode("utf-8"), *fields]
    out = bytearray()
    for part in parts:
        out += len(part).to_bytes(4, "big")
        out += part
    return bytes(out)


def labeled_hash(label: str, *fields: bytes) -> bytes:
    """SHA-256 over the framed ``(label, *fields)`` sequence; 32 bytes."""
    return hashlib.sha256(frame_fields(label, fields)).digest()


def labeled_xof(label: str, fields: Iterable[bytes], length: int) -> bytes:
    return hashlib.shake_256(frame_fields(label, fields)).digest(length)
