"""Load-adaptive batch allocation and the per-step index sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .device import DeviceDescriptor, ScoreTable
from .errors import InputError
from .rng import permutation

# Quotas closer than this are treated as equal, so float noise from rescaling
# scores cannot change which rank wins a leftover unit.
REMAINDER_TOL = 1e-9


@dataclass(frozen=True)
class BatchAllocation:
    sizes: dict  # rank -> samples per step
    global_batch: int

    def __getitem__(self, rank: int) -> int:
        return self.sizes[rank]

    def ranks(self) -> list:
        return sorted(self.sizes)

    def offsets(self) -> dict:
        """Start of each rank's sub-slice within a global batch (ascending rank)."""
        out, start = {}, 0
        for r in self.ranks():
            out[r] = start
            start += self.sizes[r]
        return out


def quotas(scores: Mapping[int, float], global_batch: int) -> dict:
    total = math.fsum(scores.values())
    return {r: scores[r] / total * global_batch for r in sorted(scores)}


def allocate_batches(scores: Union[ScoreTable, Mapping[int, float]], global_batch: int) -> BatchAllocation:
    """Split ``global_batch`` proportionally to ``scores`` (largest remainder).

    Every rank first gets ``floor(quota)``; the units still missing go one
    each to the largest fractional remainders, lower rank first on ties.
    Sizes may be zero when ``global_batch`` is small.
    """
    if isinstance(scores, ScoreTable):
        scores = scores.scores
    if not scores:
        raise InputError("need at least one rank to allocate to")
    if global_batch < 1:
        raise InputError(f"global batch must be >= 1, got {global_batch}")
    for r, s in scores.items():
        if not (s > 0 and math.isfinite(s)):
            raise InputError(f"score for rank {r} must be positive and finite, got {s}")

    q = quotas(scores, global_batch)
    floors = {r: math.floor(v + REMAINDER_TOL) for r, v in q.items()}
    remainders = {r: q[r] - floors[r] for r in q}
    leftover = global_batch - sum(floors.values())

    order = sorted(q, key=lambda r: (-remainders[r], r))
    # merge near-equal remainders into ties, resolved by ascending rank
    clusters, current = [], [order[0]]
    for r in order[1:]:
        if remainders[current[-1]] - remainders[r] <= REMAINDER_TOL:
            current.append(r)
        else:
            clusters.append(current)
            current = [r]
    clusters.append(current)
    ranked = [r for c in clusters for r in sorted(c)]

    sizes = dict(floors)
    for r in ranked[:leftover]:
        sizes[r] += 1
    return BatchAllocation(sizes=sizes, global_batch=global_batch)


def equal_allocation(ranks: Sequence[int], global_batch: int) -> BatchAllocation:
    return allocate_batches({r: 1.0 for r in ranks}, global_batch)


@dataclass(frozen=True)
class StepPartition:
    step_index: int
    indices: dict  # rank -> np.ndarray of dataset indices


def epoch_seed(seed: int, epoch: int) -> int:
    return (seed ^ epoch) & ((1 << 64) - 1)


def partition_indices(alloc: BatchAllocation, dataset_len: int, epoch: int, seed: int) -> list[StepPartition]:
    """Shuffle the dataset for ``epoch`` and cut it into per-rank step slices.

    Step ``s`` covers permutation positions ``[s*B, (s+1)*B)``; ranks take
    consecutive sub-slices in ascending rank order. The trailing partial
    batch is dropped.
    """
    B = alloc.global_batch
    if dataset_len < B:
        raise InputError(f"dataset of {dataset_len} samples is smaller than the global batch {B}")
    perm = permutation(dataset_len, epoch_seed(seed, epoch))
    offsets = alloc.offsets()
    steps = []
    for s in range(dataset_len // B):
        base = s * B
        steps.append(StepPartition(
            step_index=s,
            indices={r: perm[base + offsets[r]: base + offsets[r] + alloc.sizes[r]] for r in alloc.ranks()},
        ))
    return steps


def predicted_step_time(alloc: BatchAllocation, devices: Sequence[DeviceDescriptor]) -> dict:
    """Modeled compute seconds per rank for one step: size * seconds_per_sample / speed."""
    by_rank = {d.rank: d for d in devices}
    if set(by_rank) != set(alloc.sizes):
        raise InputError("allocation ranks and device ranks differ")
    return {r: by_rank[r].compute_time(alloc.sizes[r]) for r in alloc.ranks()}


def imbalance(times: Mapping[int, float]) -> float:
    """max/min of per-rank step times (1.0 = perfectly balanced)."""
    vals = np.array(list(times.values()), dtype=float)
    return float(vals.max() / vals.min())
