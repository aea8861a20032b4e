"""Run one worker per simulated device inside the current process."""

from __future__ import annotations

import logging
import threading
import traceback
from typing import Callable, Sequence

from .device import DeviceDescriptor
from .errors import ExperimentError
from .group import CollectiveContext, PeerMesh
from .rendezvous import RendezvousClient, RendezvousServerConfig, serve

log = logging.getLogger(__name__)


def run_world(devices: Sequence[DeviceDescriptor], worker: Callable[[CollectiveContext], object],
              timeout: float = 30.0, join_timeout: float | None = None,
              abort_grace: float = 1.0) -> list:
    """Rendezvous ``devices`` and run ``worker(ctx)`` on one thread per rank.

    Returns the workers' results ordered by rank. If any worker raises, all
    data links are torn down ``abort_grace`` seconds later so the others fail
    fast, and an :class:`ExperimentError` listing every failing rank is
    raised. The grace period lets errors that every rank detects on its own
    surface as themselves rather than as broken links.
    """
    devices = sorted(devices, key=lambda d: d.rank)
    n = len(devices)
    results: list = [None] * n
    failures: dict = {}
    meshes = [PeerMesh(d.rank, timeout=timeout) for d in devices]
    abort = threading.Event()
    lock = threading.Lock()
    timers: list = []

    def close_all():
        for m in meshes:
            m.close()

    def abort_all():
        with lock:
            if abort.is_set():
                return
            abort.set()
            timer = threading.Timer(abort_grace, close_all)
            timer.daemon = True
            timers.append(timer)
            timer.start()

    with serve(RendezvousServerConfig(world_size=n)) as server:
        def body(i: int):
            dev = devices[i]
            client = RendezvousClient(server.address, timeout=timeout)
            try:
                topo = client.register(dev.rank, dev, meshes[i].address, timeout=timeout)
                ctx = CollectiveContext(dev.rank, topo, dev, meshes[i], store=client, timeout=timeout)
                results[i] = worker(ctx)
            except BaseException as exc:  # noqa: BLE001 - reported per rank
                failures[dev.rank] = exc
                log.debug("rank %d failed:\n%s", dev.rank, traceback.format_exc())
                abort_all()
            finally:
                client.close()

        threads = [threading.Thread(target=body, args=(i,), name=f"rank-{devices[i].rank}", daemon=True)
                   for i in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(join_timeout)
        hung = [devices[i].rank for i, t in enumerate(threads) if t.is_alive()]
        for r in hung:
            failures.setdefault(r, TimeoutError("worker did not finish"))
        for timer in timers:
            timer.cancel()
        close_all()

    if failures:
        first = min(failures)
        detail = "; ".join(f"rank {r}: {type(e).__name__}: {e}" for r, e in sorted(failures.items()))
        raise ExperimentError(f"{len(failures)} of {n} workers failed ({detail})", failures) from failures[first]
    return results
