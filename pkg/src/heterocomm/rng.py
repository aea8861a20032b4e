"""Portable deterministic random streams.

Everything that must be reproducible across ranks (and across
implementations in other languages) draws from :class:`SplitMix64`:
dataset generation, initial parameters and the per-epoch shuffle.
numpy's own generators are deliberately not used for these paths.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64_mix(z: np.ndarray) -> np.ndarray:
    """Finalizer of splitmix64 applied elementwise to a uint64 array."""
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


class SplitMix64:
    """Sequential splitmix64 stream, vectorized over blocks of draws.

    ``SplitMix64(s).next_u64(k)`` returns exactly the first ``k`` outputs of
    the reference scalar generator seeded with ``s``.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self, count: int) -> np.ndarray:
        if count <= 0:
            return np.empty(0, dtype=np.uint64)
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
        self.state = (self.state + count * GOLDEN_GAMMA) & MASK64
        return splitmix64_mix(states)

    def uniform(self, count: int) -> np.ndarray:
        """Doubles in [0, 1) built from the top 53 bits of each draw."""
        return (self.next_u64(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, count: int) -> np.ndarray:
        """Standard normals via Box-Muller; each pair of uniforms yields two values."""
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))  # 1 - u lies in (0, 1]
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = radius * np.cos(theta)
        z[:, 1] = radius * np.sin(theta)
        return z.reshape(-1)[:count]


def splitmix64_scalar(seed: int, count: int) -> list[int]:
    """Pure-Python reference generator, used to cross-check the vectorized one."""
    state = seed & MASK64
    out = []
    for _ in range(count):
        state = (state + GOLDEN_GAMMA) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        out.append(z ^ (z >> 31))
    return out


def permutation(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates shuffle of ``0..n-1``.

    For ``i = n-1, ..., 1`` the swap partner is ``draw % (i + 1)`` where
    draws come from ``SplitMix64(seed)`` in order.
    """
    perm = np.arange(n, dtype=np.int64)
    if n < 2:
        return perm
    draws = SplitMix64(seed).next_u64(n - 1)
    bounds = np.arange(n, 1, -1, dtype=np.uint64)
    partners = (draws % bounds).tolist()
    p = perm.tolist()
    for i, j in zip(range(n - 1, 0, -1), partners):
        p[i], p[j] = p[j], p[i]
    return np.asarray(p, dtype=np.int64)
