import socket

import pytest
from hypothesis import given, settings, strategies as st

from fsreal.errors import FramingError, ShortReadError
from fsreal.net.protocol import (HEADER_SIZE, SERVER_ID, Frame, MsgType, frame_decode, frame_encode, read_frame,
                                 write_frame)

frames = st.builds(
    Frame,
    msg_type=st.sampled_from(list(MsgType)),
    round=st.integers(0, 2 ** 32 - 1),
    sender_id=st.integers(0, 2 ** 64 - 1),
    codec_id=st.integers(0, 255),
    payload=st.binary(max_size=200),
)


def test_hello_layout():
    raw = frame_encode(Frame(MsgType.HELLO))
    assert len(raw) == 23 == HEADER_SIZE
    assert raw[:6] == bytes([0x46, 0x53, 0x52, 0x4C, 0x01, 0x00])
    assert raw[19:23] == b"\x00\x00\x00\x00"


def test_field_offsets_little_endian():
    raw = frame_encode(Frame(MsgType.MODEL_UPLOAD, round=0x01020304, sender_id=SERVER_ID, codec_id=3, payload=b"ab"))
    assert raw[5] == 2
    assert raw[6:10] == bytes([4, 3, 2, 1])
    assert raw[10:18] == b"\xff" * 8
    assert raw[18] == 3
    assert raw[19:23] == (2).to_bytes(4, "little")
    assert raw[23:] == b"ab"


@settings(max_examples=2000, deadline=None)
@given(frames)
def test_roundtrip(frame):
    raw = frame_encode(frame)
    assert len(raw) == frame.wire_size
    assert frame_decode(raw) == frame


@settings(max_examples=300, deadline=None)
@given(frames)
def test_any_truncation_is_a_short_read(frame):
    raw = frame_encode(frame)
    with pytest.raises(ShortReadError):
        frame_decode(raw[:-1])


@pytest.mark.parametrize("offset,value,field", [(0, ord("X"), "magic"), (4, 2, "version"), (5, 9, "msg_type")])
def test_bad_header_fields_are_named(offset, value, field):
    raw = bytearray(frame_encode(Frame(MsgType.ACK, payload=b"p")))
    raw[offset] = value
    with pytest.raises(FramingError) as err:
        frame_decode(bytes(raw))
    assert err.value.field == field and err.value.offset == offset


def test_length_mismatch():
    raw = frame_encode(Frame(MsgType.ACK, payload=b"pq"))
    with pytest.raises(FramingError) as err:
        frame_decode(raw + b"z")
    assert err.value.field == "payload_len"
    with pytest.raises(FramingError):
        frame_encode(Frame(MsgType.ACK, round=2 ** 32))


def test_socket_io():
    a, b = socket.socketpair()
    with a, b:
        f = Frame(MsgType.TASK_BROADCAST, 7, SERVER_ID, 1, b"x" * 5000)
        assert write_frame(a, f) == 23 + 5000
        assert read_frame(b) == f
        a.sendall(frame_encode(f)[:30])
        a.shutdown(socket.SHUT_WR)
        with pytest.raises(ShortReadError):
            read_frame(b)
        with pytest.raises(EOFError):
            read_frame(b)
