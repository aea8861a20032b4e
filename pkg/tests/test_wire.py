import io
import socket
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heterocomm.errors import DataError, EncodingError, IncompleteFrameError, ProtocolError
from heterocomm.wire import (
    HEADER_SIZE,
    MsgType,
    decode_frame,
    decode_tensor,
    encode_frame,
    encode_tensor,
)


def test_empty_ack_bytes():
    assert encode_frame(MsgType.ACK, b"") == bytes([0x4B, 0x01, 0x09, 0, 0, 0, 0])


def test_single_zero_tensor_frame():
    payload = encode_tensor([0.0])
    frame = encode_frame(MsgType.TENSOR, payload)
    assert len(payload) == 12
    assert len(frame) == HEADER_SIZE + 12
    assert frame[3:7] == bytes([12, 0, 0, 0])


def test_payload_length_is_little_endian():
    frame = encode_frame(MsgType.KV_PUT, bytes(300))
    assert frame[3:7] == bytes([0x2C, 0x01, 0x00, 0x00])


def test_oversize_payload_rejected():
    class Huge(bytes):
        def __len__(self):
            return 2**32

    with pytest.raises(EncodingError):
        encode_frame(MsgType.KV_PUT, Huge())


def test_unknown_type_on_encode():
    with pytest.raises(EncodingError):
        encode_frame(42, b"")


def test_ack_roundtrip():
    assert decode_frame(encode_frame(MsgType.ACK, b"")) == (MsgType.ACK, b"")


@settings(max_examples=1000)
@given(st.sampled_from(list(MsgType)), st.binary(max_size=2048))
def test_frame_roundtrip(msg_type, payload):
    assert decode_frame(encode_frame(msg_type, payload)) == (msg_type, payload)


@pytest.mark.parametrize("raw,exc", [
    (b"\xff\x01\x09\x00\x00\x00\x00", ProtocolError),
    (b"\x4b\x07\x09\x00\x00\x00\x00", ProtocolError),
    (b"\x4b\x01\x00\x00\x00\x00\x00", ProtocolError),
    (b"\x4b\x01\x0a\x00\x00\x00\x00", ProtocolError),
    (b"\x4b\x01\x09", IncompleteFrameError),
    (b"\x4b\x01\x08\x10\x00\x00\x00abc", IncompleteFrameError),
    (b"", IncompleteFrameError),
])
def test_malformed_frames(raw, exc):
    with pytest.raises(exc):
        decode_frame(raw)


def test_stream_with_several_frames_respects_boundaries():
    frames = [(MsgType.KV_PUT, b"abc"), (MsgType.ACK, b""), (MsgType.TENSOR, encode_tensor([1.5, -2.0]))]
    stream = io.BytesIO(b"".join(encode_frame(t, p) for t, p in frames) + b"\x4b")
    for expected in frames:
        assert decode_frame(stream) == expected
    assert stream.read() == b"\x4b"


def test_decode_from_socket():
    a, b = socket.socketpair()
    with a, b:
        a.sendall(encode_frame(MsgType.KV_VAL, b"xyz") + encode_frame(MsgType.ACK))
        assert decode_frame(b) == (MsgType.KV_VAL, b"xyz")
        assert decode_frame(b) == (MsgType.ACK, b"")
        a.close()
        with pytest.raises(IncompleteFrameError):
            decode_frame(b)


def test_empty_tensor_bytes():
    assert encode_tensor([]) == b"\x00\x00\x00\x00"
    assert decode_tensor(b"\x00\x00\x00\x00").size == 0


def test_unit_tensor_bytes():
    assert encode_tensor([1.0]) == b"\x01\x00\x00\x00" + struct.pack("<d", 1.0)


def test_random_1024_tensor_roundtrips_bitwise(rng):
    t = rng.standard_normal(1024) * np.exp(rng.uniform(-300, 300, 1024))
    assert decode_tensor(encode_tensor(t)).tobytes() == t.tobytes()


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=1000)
@given(st.lists(finite, max_size=64))
def test_tensor_roundtrip_bitwise(values):
    t = np.array(values, dtype=np.float64)
    assert decode_tensor(encode_tensor(t)).tobytes() == t.tobytes()


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_nonfinite_rejected(bad):
    with pytest.raises(DataError):
        encode_tensor([1.0, bad])
    raw = b"\x01\x00\x00\x00" + struct.pack("<d", bad)
    with pytest.raises(DataError):
        decode_tensor(raw)


@pytest.mark.parametrize("raw", [b"", b"\x01\x00", b"\x02\x00\x00\x00" + bytes(8), b"\x00\x00\x00\x00\x00"])
def test_length_mismatch_rejected(raw):
    with pytest.raises(DataError):
        decode_tensor(raw)
