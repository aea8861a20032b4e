"""Simulated accelerators and the speed-profiling procedure.

A simulated device turns work into sleeping: ``n`` samples cost
``n * seconds_per_sample / speed_factor`` seconds and a device<->host copy
of ``b`` bytes costs ``copy_latency + b / copy_bandwidth``. Each helper
blocks for that long and returns the exact modeled duration, so wall-clock
effects are observable while assertions can use jitter-free numbers.
"""

from __future__ import annotations

import math
import statistics
import struct
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

from .errors import InputError

DEFAULT_SECONDS_PER_SAMPLE = 200e-6
DEFAULT_COPY_LATENCY = 50e-6
DEFAULT_COPY_BANDWIDTH = 10e9
DEFAULT_PROBE_BATCH = 32
DEFAULT_PROBE_STEPS = 5


@dataclass(frozen=True)
class DeviceDescriptor:
    rank: int
    kind: str
    speed_factor: float = 1.0
    copy_latency: float = DEFAULT_COPY_LATENCY
    copy_bandwidth: float = DEFAULT_COPY_BANDWIDTH
    seconds_per_sample: float = DEFAULT_SECONDS_PER_SAMPLE

    def __post_init__(self):
        if self.rank < 0:
            raise InputError(f"rank must be non-negative, got {self.rank}")
        if not self.kind or len(self.kind.encode()) > 255:
            raise InputError("kind must be a non-empty tag of at most 255 bytes")
        if not (self.speed_factor > 0 and math.isfinite(self.speed_factor)):
            raise InputError(f"speed_factor must be positive, got {self.speed_factor}")
        if not self.copy_latency >= 0:
            raise InputError(f"copy_latency must be >= 0, got {self.copy_latency}")
        if not self.copy_bandwidth > 0:
            raise InputError(f"copy_bandwidth must be positive, got {self.copy_bandwidth}")
        if not self.seconds_per_sample > 0:
            raise InputError(f"seconds_per_sample must be positive, got {self.seconds_per_sample}")

    def compute_time(self, n_samples: int) -> float:
        return n_samples * self.seconds_per_sample / self.speed_factor

    def host_copy_time(self, n_bytes: int) -> float:
        return self.copy_latency + n_bytes / self.copy_bandwidth


def _block(seconds: float) -> None:
    if seconds > 0:
        time.sleep(seconds)


def simulate_compute(d: DeviceDescriptor, n_samples: int, block: bool = True) -> float:
    """Occupy the calling worker for the modeled compute time of ``n_samples``."""
    if n_samples < 0:
        raise InputError(f"n_samples must be >= 0, got {n_samples}")
    modeled = d.compute_time(n_samples)
    if block:
        _block(modeled)
    return modeled


def simulate_host_copy(d: DeviceDescriptor, n_bytes: int, block: bool = True) -> float:
    """Occupy the calling worker for one device<->host transfer of ``n_bytes``."""
    if n_bytes < 0:
        raise InputError(f"n_bytes must be >= 0, got {n_bytes}")
    modeled = d.host_copy_time(n_bytes)
    if block:
        _block(modeled)
    return modeled


def benchmark(
    d: DeviceDescriptor,
    probe_batch: int = DEFAULT_PROBE_BATCH,
    probe_steps: int = DEFAULT_PROBE_STEPS,
    work: Optional[Callable[[DeviceDescriptor, int], object]] = None,
    clock: str = "wall",
) -> float:
    """Profile ``d`` on a few probe steps and return the median step time.

    Args:
        d: device to profile.
        probe_batch: samples per probe step.
        probe_steps: number of probe steps; the median over them is returned
            so a single warm-up outlier does not skew the result.
        work: one training step, called as ``work(d, probe_batch)``. Defaults
            to :func:`simulate_compute`. When ``clock="modeled"`` it must
            return the modeled seconds it consumed.
        clock: ``"wall"`` measures each step with a monotonic clock;
            ``"modeled"`` uses the value returned by ``work`` instead.
    """
    if probe_batch < 1 or probe_steps < 1:
        raise InputError("probe_batch and probe_steps must both be >= 1")
    if clock not in ("wall", "modeled"):
        raise InputError(f"unknown clock {clock!r}")
    if work is None:
        work = simulate_compute
    times = []
    for _ in range(probe_steps):
        start = time.perf_counter()
        result = work(d, probe_batch)
        elapsed = time.perf_counter() - start
        times.append(float(result) if clock == "modeled" else elapsed)
    return statistics.median(times)


@dataclass(frozen=True)
class ScoreTable:
    """Relative device speeds; the fastest rank scores exactly 1.0."""

    scores: dict

    def __getitem__(self, rank: int) -> float:
        return self.scores[rank]

    def __len__(self):
        return len(self.scores)

    def ranks(self) -> list:
        return sorted(self.scores)


def compute_scores(times: Mapping[int, float]) -> ScoreTable:
    """score_i = min(times) / times_i."""
    if not times:
        raise InputError("compute_scores needs at least one timing")
    for rank, t in times.items():
        if not (t > 0 and math.isfinite(t)):
            raise InputError(f"time for rank {rank} must be positive and finite, got {t}")
    fastest = min(times.values())
    return ScoreTable({rank: fastest / times[rank] for rank in sorted(times)})


def pack_time(seconds: float) -> bytes:
    return struct.pack("<d", seconds)


def unpack_time(b: bytes) -> float:
    if len(b) != 8:
        raise InputError(f"benchmark time must be 8 bytes, got {len(b)}")
    return struct.unpack("<d", b)[0]
