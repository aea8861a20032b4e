"""Hybrid collective communication over homogeneous device groups.

Ranks of the same device kind form a group and talk directly (the role a
vendor library plays on real hardware). Groups talk to each other only
through their leaders, and every such transfer is staged through host
memory: device->host copy, TCP transfer, host->device copy. Only the staged
path is charged host-copy cost.

All sums use a fixed association order (ascending rank inside a group, then
ascending leader across groups) and are computed at a single rank; everybody
else receives the finished bits. Results are therefore bitwise identical on
every rank.

Collectives are blocking and must be issued in the same order by every
participant. Each participant set keeps its own sequence number, stamped
into every data frame and checked on receipt.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .device import DeviceDescriptor, simulate_host_copy
from .errors import CollectiveError, DataError, HeteroCommError, InputError, TransportError
from .rendezvous import Status, decode_ack, encode_ack, parse_address
from .topology import Topology
from .wire import MsgType, decode_frame, decode_tensor, encode_tensor, send_frame

log = logging.getLogger(__name__)

INTRA = "intra"
HIERARCHICAL = "hierarchical"

_OP = struct.Struct("<Q")
_HELLO = struct.Struct("<I")


class PeerMesh:
    """Lazily connected point-to-point TCP links between the ranks of one world.

    The mesh listens before rendezvous so its address can be published. For
    any pair, the lower rank dials and the higher rank accepts, so both sides
    simply call :meth:`link` when they need to talk.
    """

    def __init__(self, rank: int, host: str = "127.0.0.1", timeout: float = 30.0):
        self.rank = rank
        self.timeout = timeout
        self._listener = socket.create_server((host, 0), backlog=64)
        self._listener.settimeout(0.1)
        bound_host, port = self._listener.getsockname()[:2]
        self.address = f"{bound_host}:{port}"
        self._links: dict[int, socket.socket] = {}
        self._cond = threading.Condition()
        self._closed = False
        self._topology: Optional[Topology] = None
        self._thread = threading.Thread(target=self._accept_loop, name=f"mesh-{rank}", daemon=True)
        self._thread.start()

    def attach(self, topology: Topology) -> None:
        self._topology = topology

    @property
    def peers(self) -> list[int]:
        with self._cond:
            return sorted(self._links)

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                conn.settimeout(self.timeout)
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                msg, payload = decode_frame(conn)
                if msg != MsgType.REGISTER or len(payload) != _HELLO.size:
                    raise DataError("bad hello on data link")
                (peer,) = _HELLO.unpack(payload)
            except (OSError, HeteroCommError) as exc:
                log.debug("rank %d dropped an incoming link: %s", self.rank, exc)
                conn.close()
                continue
            with self._cond:
                if self._closed:
                    conn.close()
                    return
                self._links[peer] = conn
                self._cond.notify_all()

    def link(self, peer: int) -> socket.socket:
        with self._cond:
            if self._closed:
                raise TransportError(f"rank {self.rank}: mesh is closed")
            if peer in self._links:
                return self._links[peer]
        if peer == self.rank:
            raise InputError("a rank cannot link to itself")
        if self.rank < peer:
            if self._topology is None:
                raise TransportError("mesh has no topology attached")
            try:
                conn = socket.create_connection(
                    parse_address(self._topology.address_of(peer)), timeout=self.timeout)
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                send_frame(conn, MsgType.REGISTER, _HELLO.pack(self.rank))
            except OSError as exc:
                raise TransportError(f"rank {self.rank} cannot reach rank {peer}: {exc}") from exc
            with self._cond:
                self._links[peer] = conn
            return conn
        deadline = time.monotonic() + self.timeout
        with self._cond:
            while peer not in self._links:
                remaining = deadline - time.monotonic()
                if self._closed or remaining <= 0:
                    raise TransportError(f"rank {self.rank}: rank {peer} never connected")
                self._cond.wait(remaining)
            return self._links[peer]

    def close(self) -> None:
        with self._cond:
            self._closed = True
            links = list(self._links.values())
            self._links.clear()
            self._cond.notify_all()
        for s in links:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        self._listener.close()


@dataclass
class CommStats:
    """Per-rank transfer counters, used to check which path a collective took."""

    host_copies: int = 0
    host_copy_seconds: float = 0.0  # modeled
    tensors_sent: int = 0
    bytes_sent: int = 0
    link_peers: set = field(default_factory=set)
    inter_peers: set = field(default_factory=set)

    @property
    def inter_links(self) -> int:
        return len(self.inter_peers)


class CollectiveContext:
    """Everything one rank needs to take part in collectives.

    ``store`` optionally carries the rank's rendezvous client so higher
    layers (the benchmark phase) can reach the key-value store.
    """

    def __init__(self, rank: int, topology: Topology, device: DeviceDescriptor,
                 mesh: PeerMesh, store=None, timeout: float = 30.0):
        if not 0 <= rank < topology.world_size:
            raise InputError(f"rank {rank} outside world of {topology.world_size}")
        self.rank = rank
        self.topology = topology
        self.device = device
        self.mesh = mesh
        self.store = store
        self.timeout = timeout
        self.stats = CommStats()
        self._counters: dict[tuple, int] = {}
        self._world_key = tuple(range(topology.world_size))
        mesh.attach(topology)

    @property
    def op_counter(self) -> int:
        """Number of world-wide collectives this rank has entered."""
        return self._counters.get(self._world_key, 0)

    def counter(self, participants: Iterable[int]) -> int:
        return self._counters.get(tuple(sorted(participants)), 0)

    def _next_op(self, participants: Iterable[int]) -> int:
        key = tuple(sorted(participants))
        n = self._counters.get(key, 0)
        self._counters[key] = n + 1
        return n

    @property
    def group(self) -> tuple:
        return self.topology.group_of(self.rank)

    @property
    def is_leader(self) -> bool:
        return self.topology.is_leader(self.rank)

    def charge_host_copy(self, n_bytes: int) -> float:
        t = simulate_host_copy(self.device, n_bytes)
        self.stats.host_copies += 1
        self.stats.host_copy_seconds += t
        return t

    # point-to-point ---------------------------------------------------
    def _sock(self, peer: int) -> socket.socket:
        sock = self.mesh.link(peer)
        self.stats.link_peers.add(peer)
        if self.topology.kind_of(peer) != self.topology.kind_of(self.rank):
            self.stats.inter_peers.add(peer)
        return sock

    def send(self, peer: int, op: int, value: "Outcome") -> None:
        """Send a tensor, or an error marker in its place, to ``peer``."""
        if isinstance(value, Exception):
            msg, payload = MsgType.ACK, encode_ack(Status.REJECTED, f"rank {self.rank}: {value}")
        else:
            msg, payload = MsgType.TENSOR, _OP.pack(op) + encode_tensor(value)
        sock = self._sock(peer)
        try:
            sock.settimeout(self.timeout)
            send_frame(sock, msg, payload)
        except socket.timeout:
            raise CollectiveError(f"rank {self.rank}: send to {peer} timed out") from None
        except OSError as exc:
            raise TransportError(f"rank {self.rank}: send to {peer} failed: {exc}") from exc
        if msg == MsgType.TENSOR:
            self.stats.tensors_sent += 1
            self.stats.bytes_sent += len(payload)

    def recv(self, peer: int, op: int) -> np.ndarray:
        sock = self._sock(peer)
        try:
            sock.settimeout(self.timeout)
            msg, payload = decode_frame(sock)
        except socket.timeout:
            raise CollectiveError(f"rank {self.rank}: receive from {peer} timed out") from None
        except (OSError, HeteroCommError) as exc:
            raise TransportError(f"rank {self.rank}: receive from {peer} failed: {exc}") from exc
        if msg == MsgType.ACK:
            _, text = decode_ack(payload)
            raise CollectiveError(f"peer failure: {text}")
        if msg != MsgType.TENSOR or len(payload) < _OP.size:
            raise TransportError(f"rank {self.rank}: unexpected {msg.name} from {peer}")
        (their_op,) = _OP.unpack_from(payload)
        if their_op != op:
            raise CollectiveError(
                f"rank {self.rank}: collective order violated, expected op {op} from {peer}, got {their_op}")
        return decode_tensor(payload[_OP.size:])


Outcome = Union[np.ndarray, CollectiveError]


def _as_tensor(t) -> np.ndarray:
    arr = np.array(t, dtype=np.float64).reshape(-1)
    return arr


def _check_finite(t: np.ndarray) -> Outcome:
    if not np.all(np.isfinite(t)):
        return CollectiveError("tensor contains NaN or Inf")
    return t


def _raise_if_error(value: Outcome) -> np.ndarray:
    if isinstance(value, Exception):
        raise value
    return value


def _reduce_to(ctx: CollectiveContext, members: Sequence[int], root: int, op: int,
               value: Outcome) -> Optional[Outcome]:
    """Sum ``value`` over ``members`` at ``root`` in ascending rank order.

    Returns the sum (or the first error seen) at ``root`` and None elsewhere.
    ``root`` must be ``min(members)`` so its own value starts the sum.
    """
    if ctx.rank != root:
        ctx.send(root, op, value)
        return None
    acc = value.copy() if not isinstance(value, Exception) else value
    for peer in members:
        if peer == root:
            continue
        try:
            x = ctx.recv(peer, op)
        except CollectiveError as exc:
            if not isinstance(acc, Exception):
                acc = exc
            continue
        if isinstance(acc, Exception):
            continue
        if x.shape != acc.shape:
            acc = CollectiveError(
                f"length mismatch: rank {root} has {acc.size} elements, rank {peer} sent {x.size}")
            continue
        acc += x
    return acc


def _fan_out(ctx: CollectiveContext, members: Sequence[int], root: int, op: int,
             value: Optional[Outcome]) -> np.ndarray:
    """Star broadcast from ``root``; errors are forwarded then raised everywhere."""
    if ctx.rank == root:
        for peer in members:
            if peer != root:
                ctx.send(peer, op, value)
        return _raise_if_error(value)
    return ctx.recv(root, op)


def _intra_allreduce(ctx, members, op, t: Outcome) -> np.ndarray:
    leader = members[0]
    total = _reduce_to(ctx, members, leader, op, t)
    return _fan_out(ctx, members, leader, op, total)


def _relay_allreduce(ctx, leaders, op, value: Outcome) -> np.ndarray:
    nbytes = 0 if isinstance(value, Exception) else 8 * value.size
    ctx.charge_host_copy(nbytes)  # device -> host
    root = leaders[0]
    total = _reduce_to(ctx, leaders, root, op, value)
    result = _fan_out(ctx, leaders, root, op, total)
    ctx.charge_host_copy(8 * result.size)  # host -> device
    return result


def _members(ctx: CollectiveContext, participants: Iterable[int]) -> tuple:
    ranks = tuple(sorted(set(participants)))
    if not ranks:
        raise InputError("participant set is empty")
    for r in ranks:
        if not 0 <= r < ctx.topology.world_size:
            raise InputError(f"unknown rank {r}")
    if ctx.rank not in ranks:
        raise InputError(f"rank {ctx.rank} is not among participants {ranks}")
    return ranks


def dispatch(ctx: CollectiveContext, collective: str, participants: Iterable[int]) -> str:
    """Choose the communication path for ``collective`` over ``participants``.

    Same device kind everywhere means the direct intra-group path; anything
    else goes through the hierarchical host-relayed path.
    """
    ranks = set(participants)
    if not ranks:
        raise InputError("participant set is empty")
    kinds = set()
    for r in ranks:
        if not 0 <= r < ctx.topology.world_size:
            raise InputError(f"unknown rank {r}")
        kinds.add(ctx.topology.kind_of(r))
    return INTRA if len(kinds) == 1 else HIERARCHICAL


def intra_allreduce(ctx: CollectiveContext, group: Iterable[int], t, op: str = "sum") -> np.ndarray:
    """Sum ``t`` over a same-kind ``group``: gather to the leader, then broadcast."""
    if op != "sum":
        raise InputError(f"unsupported reduction {op!r}")
    members = _members(ctx, group)
    seq = ctx._next_op(members)
    t = _as_tensor(t)
    if len(members) == 1:
        return t
    return _intra_allreduce(ctx, members, seq, _check_finite(t))


def intra_broadcast(ctx: CollectiveContext, group: Iterable[int], t, root: int) -> np.ndarray:
    members = _members(ctx, group)
    if root not in members:
        raise InputError(f"root {root} is not in group {members}")
    seq = ctx._next_op(members)
    value = _check_finite(_as_tensor(t)) if ctx.rank == root else None
    if len(members) == 1:
        return _raise_if_error(value)
    return _fan_out(ctx, members, root, seq, value)


def inter_allreduce(ctx: CollectiveContext, leaders: Iterable[int], t) -> np.ndarray:
    """Sum ``t`` across group leaders through the host-staged relay.

    Each leader pays a device->host copy before sending and a host->device
    copy after receiving, even when it is the only leader.
    """
    members = _members(ctx, leaders)
    if not ctx.is_leader:
        raise InputError(f"rank {ctx.rank} is not a group leader")
    seq = ctx._next_op(members)
    return _relay_allreduce(ctx, members, seq, _check_finite(_as_tensor(t)))


def hetero_allreduce(ctx: CollectiveContext, t) -> np.ndarray:
    """World-wide sum, routed by :func:`dispatch`.

    One group: a plain intra-group allreduce. Several groups: reduce inside
    each group to its leader, relay-allreduce across leaders, then broadcast
    the global sum back inside each group.
    """
    topo = ctx.topology
    world = ctx._world_key
    seq = ctx._next_op(world)
    t = _as_tensor(t)
    value = _check_finite(t)
    if dispatch(ctx, "allreduce", world) == INTRA:
        if topo.world_size == 1:
            return _raise_if_error(value)
        return _intra_allreduce(ctx, world, seq, value)
    group = ctx.group
    leader = group[0]
    group_sum = _reduce_to(ctx, group, leader, seq, value)
    if ctx.rank == leader:
        total: Optional[Outcome]
        try:
            total = _relay_allreduce(ctx, topo.leaders, seq, group_sum)
        except CollectiveError as exc:
            total = exc
    else:
        total = None
    return _fan_out(ctx, group, leader, seq, total)


def hetero_broadcast(ctx: CollectiveContext, t, root: int) -> np.ndarray:
    """Deliver ``root``'s tensor to every rank.

    Route: root's group (direct), then root-group leader -> other leaders via
    the host relay, then each other group (direct).
    """
    topo = ctx.topology
    if not 0 <= root < topo.world_size:
        raise InputError(f"unknown root {root}")
    world = ctx._world_key
    seq = ctx._next_op(world)
    value: Optional[Outcome] = _check_finite(_as_tensor(t)) if ctx.rank == root else None
    if dispatch(ctx, "broadcast", world) == INTRA:
        if topo.world_size == 1:
            return _raise_if_error(value)
        return _fan_out(ctx, world, root, seq, value)

    root_group = topo.group_of(root)
    group = ctx.group
    leader = group[0]
    if group == root_group:
        got: Outcome
        try:
            got = _fan_out(ctx, group, root, seq, value) if len(group) > 1 else _raise_if_error(value)
        except CollectiveError as exc:
            if ctx.rank != leader:
                raise
            got = exc
        if ctx.rank != leader:
            return got
        # leader relays to the other leaders
        if not isinstance(got, Exception):
            ctx.charge_host_copy(8 * got.size)
        for other in topo.leaders:
            if other != leader:
                ctx.send(other, seq, got)
        return _raise_if_error(got)

    if ctx.rank == leader:
        try:
            got = ctx.recv(root_group[0], seq)
            ctx.charge_host_copy(8 * got.size)
        except CollectiveError as exc:
            got = exc
        return _fan_out(ctx, group, leader, seq, got)
    return ctx.recv(leader, seq)
