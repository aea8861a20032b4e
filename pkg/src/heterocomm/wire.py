"""Length-prefixed binary framing and tensor serialization.

Every TCP connection in the package (rendezvous control traffic and the
rank-to-rank data links) carries a stream of frames::

    magic (0x4B) | version (0x01) | msg_type (u8) | payload_len (u32 LE) | payload

Tensors travel as ``count (u32 LE) | count x f64 LE``.
"""

from __future__ import annotations

import enum
import io
import socket
import struct
from typing import Union

import numpy as np

from .errors import DataError, EncodingError, IncompleteFrameError, ProtocolError

MAGIC = 0x4B
VERSION = 0x01
HEADER = struct.Struct("<BBBI")
HEADER_SIZE = HEADER.size  # 7
MAX_PAYLOAD = 2**32 - 1


class MsgType(enum.IntEnum):
    REGISTER = 1
    TOPOLOGY = 2
    KV_PUT = 3
    KV_GET = 4
    KV_VAL = 5
    BARRIER = 6
    BARRIER_RELEASE = 7
    TENSOR = 8
    ACK = 9


def encode_frame(msg_type: MsgType | int, payload: bytes = b"") -> bytes:
    n = len(payload)
    if n > MAX_PAYLOAD:
        raise EncodingError(f"payload of {n} bytes does not fit a u32 length field")
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise EncodingError(f"unknown message type {msg_type!r}") from None
    return HEADER.pack(MAGIC, VERSION, msg_type, n) + bytes(payload)


def _reader(stream):
    if isinstance(stream, (bytes, bytearray, memoryview)):
        stream = io.BytesIO(stream)
    if isinstance(stream, socket.socket):
        return lambda n: _recv_exact(stream, n)
    return lambda n: _read_exact(stream, n)


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            raise IncompleteFrameError(f"stream ended {remaining} bytes short of a frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:])
        if k == 0:
            raise IncompleteFrameError(f"connection closed {n - got} bytes short of a frame")
        got += k
    return bytes(buf)


def decode_frame(stream) -> tuple[MsgType, bytes]:
    """Read exactly one frame from ``stream``.

    ``stream`` may be a bytes-like object, any object with ``read(n)`` or a
    connected socket. Nothing beyond the declared payload is consumed, so a
    stream carrying several frames can be decoded by repeated calls.
    """
    read = _reader(stream)
    header = read(HEADER_SIZE)
    magic, version, raw_type, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic byte 0x{magic:02X}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise ProtocolError(f"unknown message type {raw_type}") from None
    return msg_type, read(length)


def send_frame(sock: socket.socket, msg_type: MsgType, payload: bytes = b"") -> None:
    # single sendall per frame: header and payload must not be split into two writes
    sock.sendall(encode_frame(msg_type, payload))


TensorLike = Union[np.ndarray, "list[float]"]


def encode_tensor(t: TensorLike) -> bytes:
    arr = np.asarray(t, dtype=np.float64).reshape(-1)
    if arr.size > MAX_PAYLOAD:
        raise EncodingError("tensor too long for a u32 element count")
    if not np.all(np.isfinite(arr)):
        raise DataError("tensor contains NaN or Inf")
    return struct.pack("<I", arr.size) + arr.astype("<f8", copy=False).tobytes()


def decode_tensor(b: bytes) -> np.ndarray:
    if len(b) < 4:
        raise DataError(f"tensor payload of {len(b)} bytes lacks a count field")
    (count,) = struct.unpack_from("<I", b)
    if len(b) != 4 + 8 * count:
        raise DataError(f"tensor declares {count} elements but carries {len(b) - 4} bytes")
    arr = np.frombuffer(b, dtype="<f8", offset=4, count=count).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError("tensor contains NaN or Inf")
    return arr
