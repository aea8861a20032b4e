"""Built-in coordination service: registration, topology, key-value store, barriers.

One TCP connection per client, request/response, frames from :mod:`heterocomm.wire`.

Payloads (all integers little-endian)::

    REGISTER         rank u32 | kind len u8 | kind | speed hint f64 (0 = unknown)
                     | address len u16 | address
    TOPOLOGY         Topology.to_bytes()
    KV_PUT           key len u16 | key | value
    KV_GET           key len u16 | key | timeout ms u32
    KV_VAL           value
    BARRIER          name len u16 | name | participants u32
    BARRIER_RELEASE  empty
    ACK              status u8 | utf-8 message   (status 0 = ok)

Requests that fail are answered with an ACK carrying a non-zero status.
"""

from __future__ import annotations

import enum
import logging
import select
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from typing import Optional, Union

from .errors import (
    BarrierError,
    IncompleteFrameError,
    NotFoundError,
    ProtocolError,
    RegistrationError,
    RendezvousError,
)
from .topology import Member, Topology, build_topology
from .wire import MsgType, decode_frame, send_frame

log = logging.getLogger(__name__)

DEFAULT_REGISTER_TIMEOUT = 30.0
_POLL = 0.05


class Status(enum.IntEnum):
    OK = 0
    REJECTED = 1
    NOT_FOUND = 2
    MISMATCH = 3
    TIMEOUT = 4
    BAD_REQUEST = 5


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {address!r}")
    return host, int(port)


def encode_ack(status: Status = Status.OK, message: str = "") -> bytes:
    return bytes([status]) + message.encode()


def decode_ack(payload: bytes) -> tuple[Status, str]:
    if not payload:
        return Status.OK, ""
    try:
        status = Status(payload[0])
    except ValueError:
        raise ProtocolError(f"unknown ACK status {payload[0]}") from None
    return status, payload[1:].decode(errors="replace")


def _pack_str16(b: bytes) -> bytes:
    if len(b) > 0xFFFF:
        raise ValueError("string longer than 65535 bytes")
    return struct.pack("<H", len(b)) + b


def _unpack_str16(payload: bytes, off: int = 0) -> tuple[bytes, int]:
    (n,) = struct.unpack_from("<H", payload, off)
    off += 2
    if off + n > len(payload):
        raise struct.error("string runs past payload end")
    return payload[off:off + n], off + n


def encode_register(rank: int, kind: str, speed_hint: float, address: str) -> bytes:
    kind_b = kind.encode()
    if len(kind_b) > 255:
        raise ValueError("kind longer than 255 bytes")
    return (struct.pack("<IB", rank, len(kind_b)) + kind_b + struct.pack("<d", speed_hint)
            + _pack_str16(address.encode()))


def decode_register(payload: bytes) -> tuple[int, str, float, str]:
    rank, klen = struct.unpack_from("<IB", payload, 0)
    off = 5
    kind = payload[off:off + klen].decode()
    off += klen
    (speed,) = struct.unpack_from("<d", payload, off)
    addr, off = _unpack_str16(payload, off + 8)
    if off != len(payload):
        raise struct.error("trailing bytes")
    return rank, kind, speed, addr.decode()


@dataclass
class RendezvousServerConfig:
    bind_address: str = "127.0.0.1:0"
    world_size: int = 1
    # server-side cap on how long one register/barrier/kv_get request may wait
    wait_timeout: float = 120.0

    def __post_init__(self):
        if self.world_size < 1:
            raise ValueError(f"world_size must be >= 1, got {self.world_size}")


class _State:
    def __init__(self, world_size: int):
        self.world_size = world_size
        self.cond = threading.Condition()
        self.registrations: dict[int, tuple[str, float, str]] = {}
        self.topology_bytes: Optional[bytes] = None
        self.kv: dict[bytes, bytes] = {}
        # name -> [participants, arrived, generation]
        self.barriers: dict[bytes, list] = {}
        self.closed = False


def _peer_gone(sock: socket.socket) -> bool:
    try:
        readable, _, _ = select.select([sock], [], [], 0)
        if not readable:
            return False
        return sock.recv(1, socket.MSG_PEEK) == b""
    except OSError:
        return True


class _Handler(socketserver.BaseRequestHandler):
    server: "_TCPServer"

    def handle(self):
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                msg, payload = decode_frame(sock)
            except IncompleteFrameError:
                return
            except ProtocolError as exc:
                self._reply(MsgType.ACK, encode_ack(Status.BAD_REQUEST, str(exc)))
                return
            except OSError:
                return
            handler = {
                MsgType.REGISTER: self._register,
                MsgType.KV_PUT: self._kv_put,
                MsgType.KV_GET: self._kv_get,
                MsgType.BARRIER: self._barrier,
            }.get(msg)
            if handler is None:
                reply = (MsgType.ACK, encode_ack(Status.BAD_REQUEST, f"unexpected {msg.name}"))
            else:
                try:
                    reply = handler(payload)
                except (struct.error, UnicodeDecodeError, ValueError) as exc:
                    reply = (MsgType.ACK, encode_ack(Status.BAD_REQUEST, f"malformed {msg.name}: {exc}"))
            if reply is None or not self._reply(*reply):
                return

    def _reply(self, msg, payload) -> bool:
        try:
            send_frame(self.request, msg, payload)
            return True
        except OSError:
            return False

    def _wait(self, state: _State, done, deadline: float) -> Optional[bool]:
        """Wait (holding state.cond) until done(); False on timeout, None if the client left."""
        while not done():
            if state.closed:
                return False
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return False
            state.cond.wait(min(_POLL, remaining))
            if not done() and _peer_gone(self.request):
                return None
        return True

    def _register(self, payload):
        state = self.server.state
        rank, kind, speed, addr = decode_register(payload)
        with state.cond:
            if rank >= state.world_size:
                return MsgType.ACK, encode_ack(
                    Status.REJECTED, f"rank {rank} out of range for world of {state.world_size}")
            if rank in state.registrations:
                return MsgType.ACK, encode_ack(Status.REJECTED, f"rank {rank} already registered")
            state.registrations[rank] = (kind, speed, addr)
            log.debug("rank %d registered (%s at %s)", rank, kind, addr)
            if len(state.registrations) == state.world_size and state.topology_bytes is None:
                topo = build_topology(
                    Member(r, k, a) for r, (k, _, a) in state.registrations.items())
                state.topology_bytes = topo.to_bytes()
                state.cond.notify_all()
            deadline = time.monotonic() + self.server.config.wait_timeout
            ok = self._wait(state, lambda: state.topology_bytes is not None, deadline)
            if not ok:
                if state.topology_bytes is None:
                    del state.registrations[rank]
                if ok is None:
                    return None
                return MsgType.ACK, encode_ack(Status.TIMEOUT, "world did not complete in time")
            return MsgType.TOPOLOGY, state.topology_bytes

    def _kv_put(self, payload):
        key, off = _unpack_str16(payload)
        if not key:
            return MsgType.ACK, encode_ack(Status.BAD_REQUEST, "empty key")
        state = self.server.state
        with state.cond:
            state.kv[key] = payload[off:]
            state.cond.notify_all()
        return MsgType.ACK, encode_ack()

    def _kv_get(self, payload):
        key, off = _unpack_str16(payload)
        (timeout_ms,) = struct.unpack_from("<I", payload, off)
        state = self.server.state
        timeout = min(timeout_ms / 1000.0, self.server.config.wait_timeout)
        with state.cond:
            ok = self._wait(state, lambda: key in state.kv, time.monotonic() + timeout)
            if ok is None:
                return None
            if not ok:
                return MsgType.ACK, encode_ack(Status.NOT_FOUND, key.decode(errors="replace"))
            return MsgType.KV_VAL, state.kv[key]

    def _barrier(self, payload):
        name, off = _unpack_str16(payload)
        (participants,) = struct.unpack_from("<I", payload, off)
        if participants < 1:
            return MsgType.ACK, encode_ack(Status.BAD_REQUEST, "participants must be >= 1")
        state = self.server.state
        with state.cond:
            entry = state.barriers.setdefault(name, [participants, 0, 0])
            if entry[1] > 0 and entry[0] != participants:
                return MsgType.ACK, encode_ack(
                    Status.MISMATCH,
                    f"barrier {name!r} expects {entry[0]} participants, got {participants}")
            entry[0] = participants
            entry[1] += 1
            generation = entry[2]
            if entry[1] == participants:
                entry[1] = 0
                entry[2] += 1
                state.cond.notify_all()
                return MsgType.BARRIER_RELEASE, b""
            deadline = time.monotonic() + self.server.config.wait_timeout
            ok = self._wait(state, lambda: entry[2] != generation, deadline)
            if not ok:
                entry[1] -= 1
                if ok is None:
                    return None
                return MsgType.ACK, encode_ack(Status.TIMEOUT, f"barrier {name!r} timed out")
            return MsgType.BARRIER_RELEASE, b""


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    block_on_close = False


class RendezvousServer:
    """Handle to a running coordination service (see :func:`serve`)."""

    def __init__(self, config: RendezvousServerConfig):
        self.config = config
        host, port = parse_address(config.bind_address)
        try:
            self._server = _TCPServer((host, port), _Handler)
        except OSError as exc:
            raise RendezvousError(f"cannot bind {config.bind_address}: {exc}") from exc
        self._server.state = _State(config.world_size)
        self._server.config = config
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={"poll_interval": 0.05},
            name="rendezvous", daemon=True)
        self._thread.start()

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def shutdown(self) -> None:
        state = self._server.state
        with state.cond:
            state.closed = True
            state.cond.notify_all()
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(config: RendezvousServerConfig) -> RendezvousServer:
    return RendezvousServer(config)


def _as_bytes(key: Union[str, bytes]) -> bytes:
    return key.encode() if isinstance(key, str) else bytes(key)


class RendezvousClient:
    """Per-worker connection to the coordination service. Not thread-safe."""

    def __init__(self, server_address: str, timeout: float = 30.0):
        self.server_address = server_address
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None

    def _conn(self) -> socket.socket:
        if self._sock is None:
            try:
                sock = socket.create_connection(parse_address(self.server_address), timeout=self.timeout)
            except OSError as exc:
                raise RendezvousError(f"cannot reach rendezvous at {self.server_address}: {exc}") from exc
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock = sock
        return self._sock

    def _request(self, msg: MsgType, payload: bytes, timeout: float):
        sock = self._conn()
        sock.settimeout(timeout)
        try:
            send_frame(sock, msg, payload)
            return decode_frame(sock)
        except socket.timeout:
            self.close()  # a late reply would desynchronize the connection
            raise
        except (OSError, IncompleteFrameError) as exc:
            self.close()
            raise RendezvousError(f"rendezvous connection failed: {exc}") from exc

    def register(self, rank: int, descriptor, data_address: str,
                 timeout: float = DEFAULT_REGISTER_TIMEOUT) -> Topology:
        """Register ``rank`` and block until the whole world has registered."""
        if rank < 0:
            raise RegistrationError(f"rank must be non-negative, got {rank}")
        speed = float(getattr(descriptor, "speed_factor", 0.0) or 0.0)
        kind = descriptor if isinstance(descriptor, str) else descriptor.kind
        payload = encode_register(rank, kind, speed, data_address)
        try:
            msg, reply = self._request(MsgType.REGISTER, payload, timeout)
        except socket.timeout:
            raise RendezvousError(f"rank {rank}: world did not assemble within {timeout}s") from None
        if msg == MsgType.TOPOLOGY:
            return Topology.from_bytes(reply)
        status, text = decode_ack(reply) if msg == MsgType.ACK else (None, msg.name)
        if status == Status.TIMEOUT:
            raise RendezvousError(text)
        raise RegistrationError(text)

    def kv_put(self, key, value: bytes) -> None:
        key = _as_bytes(key)
        if not key:
            raise ValueError("key must be non-empty")
        msg, reply = self._request(MsgType.KV_PUT, _pack_str16(key) + bytes(value), self.timeout)
        self._expect_ok(msg, reply)

    def kv_get(self, key, timeout: float = 30.0) -> bytes:
        key = _as_bytes(key)
        payload = _pack_str16(key) + struct.pack("<I", max(0, int(timeout * 1000)))
        try:
            msg, reply = self._request(MsgType.KV_GET, payload, timeout + 5.0)
        except socket.timeout:
            raise NotFoundError(key.decode(errors="replace")) from None
        if msg == MsgType.KV_VAL:
            return reply
        status, text = decode_ack(reply) if msg == MsgType.ACK else (None, msg.name)
        if status == Status.NOT_FOUND:
            raise NotFoundError(text)
        raise ProtocolError(f"kv_get failed: {text}")

    def barrier(self, name, participants: int, timeout: float = 30.0) -> None:
        name = _as_bytes(name)
        payload = _pack_str16(name) + struct.pack("<I", participants)
        try:
            msg, reply = self._request(MsgType.BARRIER, payload, timeout)
        except socket.timeout:
            raise BarrierError(f"barrier {name!r} timed out after {timeout}s") from None
        if msg == MsgType.BARRIER_RELEASE:
            return
        status, text = decode_ack(reply) if msg == MsgType.ACK else (None, msg.name)
        if status == Status.TIMEOUT:
            raise BarrierError(text)
        raise ProtocolError(text)

    @staticmethod
    def _expect_ok(msg, reply):
        if msg != MsgType.ACK:
            raise ProtocolError(f"expected ACK, got {msg.name}")
        status, text = decode_ack(reply)
        if status != Status.OK:
            raise ProtocolError(f"request rejected ({status.name}): {text}")

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def register(server_address: str, rank: int, descriptor, data_address: str,
             timeout: float = DEFAULT_REGISTER_TIMEOUT) -> Topology:
    """One-shot registration on a fresh connection."""
    with RendezvousClient(server_address, timeout=timeout) as client:
        return client.register(rank, descriptor, data_address, timeout=timeout)
