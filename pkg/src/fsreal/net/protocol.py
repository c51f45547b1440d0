"""Framed wire protocol.

Every frame is a 23-byte little-endian header followed by the payload::

    offset  size  field
    0       4     magic "FSRL"
    4       1     version (1)
    5       1     msg_type
    6       4     round (u32)
    10      8     sender_id (u64)
    18      1     codec_id (u8)
    19      4     payload_len (u32)
    23      n     payload
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from ..errors import FramingError, ShortReadError

MAGIC = b"FSRL"
VERSION = 1
HEADER = struct.Struct("<4sBBIQBI")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 1 << 30

SERVER_ID = 0xFFFF_FFFF_FFFF_FFFF
UNASSIGNED_ID = 0xFFFF_FFFF_FFFF_FFFE

_FIELD_OFFSETS = {"magic": 0, "version": 4, "msg_type": 5, "round": 6, "sender_id": 10,
                  "codec_id": 18, "payload_len": 19, "payload": 23}


class MsgType(enum.IntEnum):
    HELLO = 0
    TASK_BROADCAST = 1
    MODEL_UPLOAD = 2
    ACK = 3
    SHUTDOWN = 4


@dataclass(frozen=True)
class Frame:
    msg_type: int
    round: int = 0
    sender_id: int = 0
    codec_id: int = 0
    payload: bytes = b""

    @property
    def wire_size(self) -> int:
        return HEADER_SIZE + len(self.payload)


def frame_encode(frame: Frame) -> bytes:
    if frame.msg_type not in MsgType._value2member_map_:
        raise FramingError(f"unknown message type {frame.msg_type}", "msg_type", _FIELD_OFFSETS["msg_type"])
    for name, bits in (("round", 32), ("sender_id", 64), ("codec_id", 8)):
        value = getattr(frame, name)
        if not 0 <= value < (1 << bits):
            raise FramingError(f"value {value} does not fit u{bits}", name, _FIELD_OFFSETS[name])
    if len(frame.payload) > MAX_PAYLOAD:
        raise FramingError(f"payload of {len(frame.payload)} bytes too large", "payload_len", 19)
    header = HEADER.pack(MAGIC, VERSION, frame.msg_type, frame.round, frame.sender_id,
                         frame.codec_id, len(frame.payload))
    return header + bytes(frame.payload)


def parse_header(buf: bytes) -> tuple[int, int, int, int, int]:
    """Validates a 23-byte header; returns (msg_type, round, sender_id, codec_id, payload_len)."""
    if len(buf) < HEADER_SIZE:
        field = next((f for f, off in sorted(_FIELD_OFFSETS.items(), key=lambda kv: kv[1])
                      if off + _field_width(f) > len(buf)), "payload_len")
        raise ShortReadError(f"need {HEADER_SIZE} header bytes, got {len(buf)}", field, len(buf))
    magic, version, msg_type, rnd, sender, codec, plen = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FramingError(f"bad magic {magic!r}", "magic", 0)
    if version != VERSION:
        raise FramingError(f"unknown version {version}", "version", 4)
    if msg_type not in MsgType._value2member_map_:
        raise FramingError(f"unknown message type {msg_type}", "msg_type", 5)
    if plen > MAX_PAYLOAD:
        raise FramingError(f"payload_len {plen} exceeds limit", "payload_len", 19)
    return msg_type, rnd, sender, codec, plen


def _field_width(name: str) -> int:
    return {"magic": 4, "version": 1, "msg_type": 1, "round": 4, "sender_id": 8,
            "codec_id": 1, "payload_len": 4, "payload": 0}[name]


def frame_decode(buf: bytes) -> Frame:
    """Decode exactly one frame occupying all of ``buf``."""
    msg_type, rnd, sender, codec, plen = parse_header(buf)
    have = len(buf) - HEADER_SIZE
    if have < plen:
        raise ShortReadError(f"payload_len says {plen} bytes, only {have} present", "payload", len(buf))
    if have > plen:
        raise FramingError(f"payload_len {plen} but {have} bytes follow the header", "payload_len", 19)
    return Frame(msg_type, rnd, sender, codec, bytes(buf[HEADER_SIZE:]))


def _recv_exact(sock, n: int, offset: int, field: str) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            if got == 0 and offset == 0:
                raise EOFError("connection closed")
            raise ShortReadError(f"connection closed after {offset + got} bytes", field, offset + got)
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock) -> Frame:
    """Blocking read of one frame from a socket. Raises EOFError on a clean close."""
    header = _recv_exact(sock, HEADER_SIZE, 0, "header")
    msg_type, rnd, sender, codec, plen = parse_header(header)
    payload = _recv_exact(sock, plen, HEADER_SIZE, "payload") if plen else b""
    return Frame(msg_type, rnd, sender, codec, payload)


def write_frame(sock, frame: Frame) -> int:
    data = frame_encode(frame)
    sock.sendall(data)
    return len(data)
