import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from heterocomm.device import DeviceDescriptor, ScoreTable
from heterocomm.errors import InputError
from heterocomm.rng import permutation
from heterocomm.sched import (
    allocate_batches,
    epoch_seed,
    equal_allocation,
    imbalance,
    partition_indices,
    predicted_step_time,
)


def hamilton_oracle(scores, B):
    """Largest remainder in exact rational arithmetic, ties to the lower rank."""
    total = sum(Fraction(s) for s in scores.values())
    q = {r: Fraction(s) / total * B for r, s in scores.items()}
    sizes = {r: math.floor(v) for r, v in q.items()}
    left = B - sum(sizes.values())
    for r in sorted(q, key=lambda r: (-(q[r] - sizes[r]), r))[:left]:
        sizes[r] += 1
    return sizes


def test_reference_scores_global_batch_256():
    assert allocate_batches({0: 1.0, 1: 0.7}, 256).sizes == {0: 151, 1: 105}


def test_symmetric_split():
    assert allocate_batches({0: 1.0, 1: 1.0}, 256).sizes == {0: 128, 1: 128}


def test_exact_quotas():
    assert allocate_batches({0: 1.0, 1: 1.0, 2: 0.5}, 10).sizes == {0: 4, 1: 4, 2: 2}


def test_accepts_score_table():
    assert allocate_batches(ScoreTable({0: 1.0, 1: 0.5}), 3).sizes == {0: 2, 1: 1}


def test_tie_goes_to_lower_rank():
    assert allocate_batches({0: 1.0, 1: 1.0, 2: 1.0}, 4).sizes == {0: 2, 1: 1, 2: 1}


def test_small_batch_allows_zero_sizes():
    a = allocate_batches({0: 1.0, 1: 0.1, 2: 0.1}, 1)
    assert a.sizes == {0: 1, 1: 0, 2: 0}


@pytest.mark.parametrize("scores,B", [({0: 0.0}, 4), ({0: -1.0}, 4), ({}, 4), ({0: 1.0}, 0),
                                      ({0: float("nan")}, 4)])
def test_invalid_inputs(scores, B):
    with pytest.raises(InputError):
        allocate_batches(scores, B)


scores_st = st.dictionaries(st.integers(0, 11), st.floats(min_value=1e-3, max_value=1.0), min_size=1)
batch_st = st.integers(min_value=1, max_value=5000)


@settings(max_examples=500)
@given(scores_st, batch_st)
def test_sum_and_quota_proximity(scores, B):
    sizes = allocate_batches(scores, B).sizes
    assert sum(sizes.values()) == B
    total = sum(Fraction(s) for s in scores.values())
    for r, s in scores.items():
        q = Fraction(s) / total * B
        assert math.floor(q) <= sizes[r] <= math.ceil(q)


@settings(max_examples=500)
@given(scores_st, batch_st)
def test_matches_rational_oracle_away_from_ties(scores, B):
    total = sum(Fraction(s) for s in scores.values())
    fracs = sorted(float(Fraction(s) / total * B % 1) for s in scores.values())
    assume(all(b - a > 1e-6 for a, b in zip(fracs, fracs[1:])))
    assume(all(min(f, 1 - f) > 1e-6 for f in fracs))
    assert allocate_batches(scores, B).sizes == hamilton_oracle(scores, B)


@settings(max_examples=500)
@given(scores_st, batch_st)
def test_monotone_in_score(scores, B):
    sizes = allocate_batches(scores, B).sizes
    for i in scores:
        for j in scores:
            if scores[i] > scores[j]:
                assert sizes[i] >= sizes[j]
            elif scores[i] == scores[j]:
                assert abs(sizes[i] - sizes[j]) <= 1
                if i < j:
                    assert sizes[i] >= sizes[j]


@settings(max_examples=300)
@given(scores_st, batch_st, st.integers(-30, 30))
def test_scale_invariance_exact_scaling(scores, B, k):
    scaled = {r: s * 2.0**k for r, s in scores.items()}
    assert allocate_batches(scaled, B) == allocate_batches(scores, B)


def test_scale_invariance_arbitrary_factors():
    gen = np.random.default_rng(11)
    for _ in range(1000):
        k = int(gen.integers(1, 9))
        scores = {r: float(gen.uniform(0.01, 1.0)) for r in range(k)}
        B = int(gen.integers(1, 4097))
        c = float(np.exp(gen.uniform(-7, 7)))
        assert allocate_batches({r: s * c for r, s in scores.items()}, B) == allocate_batches(scores, B)


def test_balance_bound_with_speed_proportional_scores():
    gen = np.random.default_rng(12)
    for _ in range(500):
        k = int(gen.integers(2, 7))
        speeds = gen.uniform(0.2, 1.0, k)
        scores = {r: float(s / speeds.max()) for r, s in enumerate(speeds)}
        B = int(gen.integers(8 * k, 2048))
        alloc = allocate_batches(scores, B)
        assume_min = min(alloc.sizes.values())
        if assume_min == 0:
            continue
        devices = [DeviceDescriptor(r, "x", speed_factor=float(speeds[r])) for r in range(k)]
        assert imbalance(predicted_step_time(alloc, devices)) <= 1 + 2 / assume_min


def test_equal_allocation_helper():
    assert equal_allocation([0, 1, 2], 7).sizes == {0: 3, 1: 2, 2: 2}


# sampler -------------------------------------------------------------

def test_single_step_partition():
    alloc = allocate_batches({0: 1.0, 1: 1.0}, 4)
    (step,) = partition_indices(alloc, 4, epoch=0, seed=1)
    a, b = step.indices[0], step.indices[1]
    assert len(a) == 2 and len(b) == 2
    assert not set(a.tolist()) & set(b.tolist())
    assert np.concatenate([a, b]).tolist() == permutation(4, epoch_seed(1, 0)).tolist()


def test_partition_deterministic():
    alloc = allocate_batches({0: 1.0, 1: 0.7}, 256)
    p1 = partition_indices(alloc, 1000, epoch=2, seed=9)
    p2 = partition_indices(alloc, 1000, epoch=2, seed=9)
    for s1, s2 in zip(p1, p2):
        for r in (0, 1):
            assert s1.indices[r].tobytes() == s2.indices[r].tobytes()


def test_partition_changes_with_epoch():
    alloc = allocate_batches({0: 1.0}, 100)
    a = partition_indices(alloc, 100, epoch=0, seed=9)[0].indices[0]
    b = partition_indices(alloc, 100, epoch=1, seed=9)[0].indices[0]
    assert a.tolist() != b.tolist()


def test_allocation_over_4096_samples():
    alloc = allocate_batches({0: 1.0, 1: 0.7}, 256)
    steps = partition_indices(alloc, 4096, epoch=0, seed=3)
    assert len(steps) == 16
    perm = permutation(4096, epoch_seed(3, 0))
    seen = []
    for s, step in enumerate(steps):
        assert step.step_index == s
        assert len(step.indices[0]) == 151 and len(step.indices[1]) == 105
        assembled = np.concatenate([step.indices[0], step.indices[1]])
        assert assembled.tolist() == perm[s * 256:(s + 1) * 256].tolist()
        seen.extend(assembled.tolist())
    assert len(set(seen)) == 4096


def test_trailing_partial_batch_dropped():
    alloc = allocate_batches({0: 1.0, 1: 1.0}, 64)
    steps = partition_indices(alloc, 200, epoch=0, seed=0)
    assert len(steps) == 3
    used = np.concatenate([np.concatenate(list(s.indices.values())) for s in steps])
    assert len(np.unique(used)) == 192


def test_zero_size_rank_gets_empty_lists():
    alloc = allocate_batches({0: 1.0, 1: 0.001}, 2)
    for step in partition_indices(alloc, 10, epoch=0, seed=0):
        assert len(step.indices[1]) == 0 and len(step.indices[0]) == 2


def test_dataset_smaller_than_batch():
    with pytest.raises(InputError):
        partition_indices(allocate_batches({0: 1.0}, 10), 9, 0, 0)


@settings(max_examples=100)
@given(scores_st, st.integers(1, 64), st.integers(0, 3), st.integers(0, 2**64 - 1), st.integers(1, 4))
def test_partition_property(scores, B, epoch, seed, n_steps):
    alloc = allocate_batches(scores, B)
    steps = partition_indices(alloc, B * n_steps + B // 2, epoch, seed)
    assert len(steps) == n_steps
    for step in steps:
        lists = [step.indices[r] for r in alloc.ranks()]
        flat = np.concatenate(lists)
        assert len(flat) == B == len(set(flat.tolist()))
        for r in alloc.ranks():
            assert len(step.indices[r]) == alloc.sizes[r]


# time model ----------------------------------------------------------

def _devs(*speeds):
    return [DeviceDescriptor(r, "x", speed_factor=s, seconds_per_sample=200e-6) for r, s in enumerate(speeds)]


def test_equal_sizes_equal_speeds():
    t = predicted_step_time(allocate_batches({0: 1.0, 1: 1.0}, 256), _devs(1.0, 1.0))
    assert t[0] == t[1]


def test_fast_slow_split_is_balanced():
    alloc = allocate_batches({0: 1.0, 1: 0.7}, 256)
    t = predicted_step_time(alloc, _devs(1.0, 0.7))
    assert imbalance(t) <= 1.01


def test_unbalanced_equal_split():
    t = predicted_step_time(allocate_batches({0: 1.0, 1: 1.0}, 256), _devs(1.0, 0.5))
    assert t[1] == pytest.approx(2 * t[0])


def test_time_model_rank_mismatch():
    with pytest.raises(InputError):
        predicted_step_time(allocate_batches({0: 1.0}, 4), _devs(1.0, 1.0))
