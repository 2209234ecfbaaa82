"""Binary framing and the post-authentication sealed channel.

Frame layout::

    length (4 bytes, big-endian; counts the type byte and the body)
    type   (1 byte)
    body   fields, each a 2-byte big-endian length followed by the octets

Channel frames carry an 8-byte sequence number and an AES-256-GCM sealed
inner frame; the nonce is four zero bytes followed by the sequence number.
"""

from __future__ import annotations

import socket
import struct

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .messages import MESSAGE_TYPES, Channel, Message

MAX_FRAME = 1 << 20
MAX_FIELD = 0xFFFF
TAG_LEN = 16


class WireError(Exception):
    pass


class Truncated(WireError):
    pass


class BadType(WireError):
    pass


class FieldCount(WireError):
    pass


class Oversize(WireError):
    pass


class BadField(WireError):
    """A field has the right framing but an invalid value."""


class SealAuthFail(WireError):
    pass


class ReplayDetected(WireError):
    pass


def encode(msg: Message) -> bytes:
    body = bytearray([msg.TYPE])
    for f in msg.to_fields():
        if len(f) > MAX_FIELD:
            raise Oversize(f"field of {len(f)} bytes exceeds {MAX_FIELD}")
        body += struct.pack(">H", len(f)) + f
    if len(body) > MAX_FRAME:
        raise Oversize(f"frame of {len(body)} bytes exceeds {MAX_FRAME}")
    return struct.pack(">I", len(body)) + bytes(body)


def decode_body(body: bytes) -> Message:
    if not body:
        raise Truncated("empty frame body")
    cls = MESSAGE_TYPES.get(body[0])
    if cls is None:
        raise BadType(f"unknown message type {body[0]:#04x}")
    fields, pos = [], 1
    while pos < len(body):
        if pos + 2 > len(body):
            raise Truncated("partial field length")
        (n,) = struct.unpack_from(">H", body, pos)
        pos += 2
        if pos + n > len(body):
            raise Truncated("field runs past end of frame")
        fields.append(body[pos : pos + n])
        pos += n
    if len(fields) != cls.NFIELDS:
        raise FieldCount(f"{cls.__name__} takes {cls.NFIELDS} fields, got {len(fields)}")
    try:
        return cls.from_fields(fields)
    except (ValueError, UnicodeDecodeError) as exc:
        raise BadField(f"{cls.__name__}: {exc}") from exc


def decode(data: bytes) -> Message:
    if len(data) < 4:
        raise Truncated("missing length prefix")
    (n,) = struct.unpack_from(">I", data)
    if n > MAX_FRAME:
        raise Oversize(f"declared length {n} exceeds {MAX_FRAME}")
    if len(data) < 4 + n:
        raise Truncated(f"frame declares {n} bytes, {len(data) - 4} present")
    if len(data) > 4 + n:
        raise FieldCount("trailing bytes after frame")
    return decode_body(data[4:])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise Truncated("connection closed mid-frame" if buf else "connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    """Read one raw frame (length prefix included) from a stream socket."""
    header = _recv_exact(sock, 4)
    (n,) = struct.unpack(">I", header)
    if n > MAX_FRAME:
        raise Oversize(f"declared length {n} exceeds {MAX_FRAME}")
    return header + _recv_exact(sock, n)


def _nonce(seq: int) -> bytes:
    return b"\x00" * 4 + seq.to_bytes(8, "big")


def channel_seal(key: bytes, seq: int, plaintext: bytes) -> Channel:
    return Channel(seq, AESGCM(key).encrypt(_nonce(seq), plaintext, None))


def channel_open(key: bytes, frame: Channel, expected_seq: int) -> bytes:
    if frame.seq != expected_seq:
        raise ReplayDetected(f"sequence {frame.seq}, expected {expected_seq}")
    try:
        return AESGCM(key).decrypt(_nonce(frame.seq), frame.sealed, None)
    except InvalidTag:
        raise SealAuthFail("channel frame failed authentication") from None


class SecureChannel:
    """Directional keys plus per-direction sequence counters for one connection."""

    def __init__(self, send_key: bytes, recv_key: bytes):
        self._send_key = send_key
        self._recv_key = recv_key
        self.send_seq = 0
        self.recv_seq = 0

    def seal(self, msg: Message) -> bytes:
        frame = channel_seal(self._send_key, self.send_seq, encode(msg))
        self.send_seq += 1
        return encode(frame)

    def open(self, raw: bytes) -> Message:
        frame = decode(raw)
        if not isinstance(frame, Channel):
            raise BadType(f"expected channel frame, got {type(frame).__name__}")
        inner = channel_open(self._recv_key, frame, self.recv_seq)
        self.recv_seq += 1
        return decode(inner)
