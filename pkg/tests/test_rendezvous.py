import random
import socket
import struct
import threading
import time

import pytest

from heterocomm.device import DeviceDescriptor
from heterocomm.errors import (
    BarrierError,
    NotFoundError,
    ProtocolError,
    RegistrationError,
    RendezvousError,
)
from heterocomm.rendezvous import (
    RendezvousClient,
    RendezvousServerConfig,
    Status,
    decode_ack,
    decode_register,
    encode_register,
    parse_address,
    register,
    serve,
)
from heterocomm.topology import Topology, build_topology
from heterocomm.wire import MsgType, decode_frame, encode_frame


@pytest.fixture
def server_factory():
    servers = []

    def make(world_size=1, **kw):
        s = serve(RendezvousServerConfig(world_size=world_size, **kw))
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.shutdown()


def _register_all(address, kinds, delays=None):
    results, errors = {}, {}

    def go(rank, kind):
        if delays:
            time.sleep(delays[rank])
        try:
            results[rank] = register(address, rank, DeviceDescriptor(rank, kind), f"127.0.0.1:{9000 + rank}")
        except Exception as exc:  # noqa: BLE001
            errors[rank] = exc

    threads = [threading.Thread(target=go, args=(r, k)) for r, k in enumerate(kinds)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(10)
    return results, errors


def test_register_payload_roundtrip():
    payload = encode_register(3, "sim-mlu", 0.5, "10.0.0.1:1234")
    assert decode_register(payload) == (3, "sim-mlu", 0.5, "10.0.0.1:1234")
    assert payload[:5] == b"\x03\x00\x00\x00\x07"


def test_world_of_one(server_factory):
    srv = server_factory(1)
    topo = register(srv.address, 0, DeviceDescriptor(0, "sim-gpu"), "127.0.0.1:1")
    assert topo.groups == ((0,),)
    assert topo.leaders == (0,)
    assert topo.address_of(0) == "127.0.0.1:1"


def test_shutdown_is_clean():
    srv = serve(RendezvousServerConfig(world_size=1))
    srv.shutdown()


def test_bind_failure():
    blocker = socket.create_server(("127.0.0.1", 0))
    port = blocker.getsockname()[1]
    try:
        with pytest.raises(RendezvousError):
            serve(RendezvousServerConfig(bind_address=f"127.0.0.1:{port}", world_size=1))
    finally:
        blocker.close()


def test_world_size_must_be_positive():
    with pytest.raises(ValueError):
        RendezvousServerConfig(world_size=0)


def test_four_ranks_get_identical_topology(server_factory):
    srv = server_factory(4)
    kinds = ["gpu", "gpu", "mlu", "mlu"]
    results, errors = _register_all(srv.address, kinds, delays=[0.03, 0.0, 0.05, 0.01])
    assert not errors
    expected = build_topology([(r, k, f"127.0.0.1:{9000 + r}") for r, k in enumerate(kinds)])
    assert expected.groups == ((0, 1), (2, 3)) and expected.leaders == (0, 2)
    blobs = {results[r].to_bytes() for r in range(4)}
    assert blobs == {expected.to_bytes()}


def test_register_blocks_until_world_complete(server_factory):
    srv = server_factory(2)
    done = {}

    def first():
        register(srv.address, 0, DeviceDescriptor(0, "gpu"), "h:1")
        done[0] = time.monotonic()

    t = threading.Thread(target=first)
    t.start()
    time.sleep(0.2)
    assert 0 not in done
    second_start = time.monotonic()
    register(srv.address, 1, DeviceDescriptor(1, "gpu"), "h:2")
    t.join(5)
    assert done[0] >= second_start


def test_duplicate_rank_rejected(server_factory):
    srv = server_factory(2)
    t = threading.Thread(target=lambda: register(srv.address, 0, DeviceDescriptor(0, "gpu"), "h:1"))
    t.start()
    time.sleep(0.1)
    with pytest.raises(RegistrationError, match="already registered"):
        register(srv.address, 0, DeviceDescriptor(0, "gpu"), "h:9")
    register(srv.address, 1, DeviceDescriptor(1, "gpu"), "h:2")
    t.join(5)


def test_rank_out_of_range(server_factory):
    srv = server_factory(2)
    with pytest.raises(RegistrationError, match="out of range"):
        register(srv.address, 2, DeviceDescriptor(2, "gpu"), "h:1")


def test_register_timeout_then_slot_is_freed(server_factory):
    srv = server_factory(2)
    with pytest.raises(RendezvousError):
        register(srv.address, 0, DeviceDescriptor(0, "gpu"), "h:1", timeout=0.3)
    time.sleep(0.2)  # server notices the dropped client and withdraws rank 0
    results, errors = _register_all(srv.address, ["gpu", "gpu"])
    assert not errors and results[0].world_size == 2


def test_kv_read_your_write(server_factory):
    srv = server_factory(1)
    with RendezvousClient(srv.address) as c:
        c.kv_put("score/0", struct.pack("<d", 1.0))
        assert c.kv_get("score/0", timeout=1.0) == struct.pack("<d", 1.0)
        c.kv_put("score/0", b"new")
        assert c.kv_get("score/0", timeout=1.0) == b"new"


def test_kv_get_waits_for_put_from_other_worker(server_factory):
    srv = server_factory(1)
    got = {}

    def getter():
        with RendezvousClient(srv.address) as c:
            got["v"] = c.kv_get("late", timeout=5.0)
            got["t"] = time.monotonic()

    t = threading.Thread(target=getter)
    t.start()
    time.sleep(0.2)
    put_time = time.monotonic()
    with RendezvousClient(srv.address) as c:
        c.kv_put("late", b"value")
    t.join(5)
    assert got["v"] == b"value" and got["t"] >= put_time


def test_kv_get_missing_times_out(server_factory):
    srv = server_factory(1)
    with RendezvousClient(srv.address) as c:
        start = time.monotonic()
        with pytest.raises(NotFoundError):
            c.kv_get("missing", timeout=0.1)
        assert time.monotonic() - start < 2.0
        c.kv_put("after", b"1")  # connection still usable
        assert c.kv_get("after", timeout=0.1) == b"1"


def test_kv_linearizable_sequence(server_factory):
    srv = server_factory(1)
    with RendezvousClient(srv.address) as writer, RendezvousClient(srv.address) as reader:
        for i in range(50):
            writer.kv_put(b"k", str(i).encode())
            assert reader.kv_get(b"k", timeout=1.0) == str(i).encode()


def test_empty_key_rejected(server_factory):
    srv = server_factory(1)
    with RendezvousClient(srv.address) as c, pytest.raises(ValueError):
        c.kv_put("", b"x")


def test_single_participant_barrier(server_factory):
    srv = server_factory(1)
    with RendezvousClient(srv.address) as c:
        start = time.monotonic()
        c.barrier("solo", 1)
        assert time.monotonic() - start < 0.5


def _barrier_round(address, name, n, rnd):
    arrivals, releases = {}, {}

    def worker(i):
        with RendezvousClient(address) as c:
            time.sleep(rnd.uniform(0, 0.15))
            arrivals[i] = time.monotonic()
            c.barrier(name, n, timeout=5.0)
            releases[i] = time.monotonic()

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(10)
    return arrivals, releases


def test_barrier_releases_nobody_early(server_factory):
    srv = server_factory(4)
    arrivals, releases = _barrier_round(srv.address, "b", 4, random.Random(3))
    assert len(releases) == 4
    assert min(releases.values()) >= max(arrivals.values())


def test_barrier_name_is_reusable(server_factory):
    srv = server_factory(4)
    rnd = random.Random(4)
    for _ in range(3):
        arrivals, releases = _barrier_round(srv.address, "again", 3, rnd)
        assert len(releases) == 3
        assert min(releases.values()) >= max(arrivals.values())


def test_barrier_participant_mismatch(server_factory):
    srv = server_factory(2)
    holder = RendezvousClient(srv.address)
    t = threading.Thread(target=lambda: holder.barrier("m", 2, timeout=5.0))
    t.start()
    time.sleep(0.1)
    with RendezvousClient(srv.address) as c, pytest.raises(ProtocolError, match="expects 2"):
        c.barrier("m", 3)
    with RendezvousClient(srv.address) as c:
        c.barrier("m", 2)
    t.join(5)
    holder.close()


def test_barrier_timeout_withdraws_arrival(server_factory):
    srv = server_factory(2)
    with RendezvousClient(srv.address) as c:
        with pytest.raises(BarrierError):
            c.barrier("t", 2, timeout=0.2)
    time.sleep(0.2)
    # the timed-out arrival must not count toward the next round
    released = threading.Event()
    a = RendezvousClient(srv.address)
    t = threading.Thread(target=lambda: (a.barrier("t", 2, timeout=5.0), released.set()))
    t.start()
    time.sleep(0.3)
    assert not released.is_set()
    with RendezvousClient(srv.address) as b:
        b.barrier("t", 2)
    t.join(5)
    assert released.is_set()
    a.close()


def test_server_rejects_garbage_and_unexpected_types(server_factory):
    srv = server_factory(1)
    with socket.create_connection(parse_address(srv.address), timeout=2) as s:
        s.sendall(encode_frame(MsgType.TENSOR, b"\x00\x00\x00\x00"))
        msg, payload = decode_frame(s)
        assert msg == MsgType.ACK and decode_ack(payload)[0] == Status.BAD_REQUEST
        s.sendall(encode_frame(MsgType.KV_PUT, b"\x05"))
        msg, payload = decode_frame(s)
        assert decode_ack(payload)[0] == Status.BAD_REQUEST
        s.sendall(b"\xff" * 7)
        msg, payload = decode_frame(s)
        assert decode_ack(payload)[0] == Status.BAD_REQUEST


def test_topology_payload_is_canonical():
    topo = build_topology([(1, "mlu", "b:2"), (0, "gpu", "a:1")])
    raw = topo.to_bytes()
    assert raw[:4] == b"\x02\x00\x00\x00"
    assert Topology.from_bytes(raw) == topo
