"""Synchronous data-parallel SGD on a linear least-squares model.

Each rank computes the *summed* gradient over its share of the global batch;
after the allreduce every rank divides by the global batch size. That makes
the update independent of how the batch was split across ranks, which is
what lets uneven, speed-proportional splits train exactly like one device.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import group as G
from .device import (
    DEFAULT_PROBE_BATCH,
    DEFAULT_PROBE_STEPS,
    DeviceDescriptor,
    ScoreTable,
    benchmark,
    compute_scores,
    pack_time,
    simulate_compute,
    unpack_time,
)
from .errors import NotFoundError, RendezvousError, SetupError
from .rng import SplitMix64
from .sched import BatchAllocation, allocate_batches, partition_indices, predicted_step_time

log = logging.getLogger(__name__)

_INIT_SALT = 0x5EED_1417
_PROBE_SALT = 0xB3_7C4


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float = 0.0

    @classmethod
    def zeros(cls, d: int) -> "LinearModel":
        return cls(np.zeros(d), 0.0)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights, [self.bias]])

    @classmethod
    def from_flat(cls, v: np.ndarray) -> "LinearModel":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:-1].copy(), float(v[-1]))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights + self.bias


@dataclass(frozen=True)
class SyntheticDataset:
    features: np.ndarray  # (n, d)
    targets: np.ndarray  # (n,)
    seed: int
    true_weights: np.ndarray
    true_bias: float
    noise_sigma: float

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def generate_dataset(seed: int, n: int = 4096, d: int = 32, noise_sigma: float = 0.1) -> SyntheticDataset:
    """targets = features @ w* + b* + sigma * noise, all drawn from one splitmix64 stream.

    Draw order: w* (d), b* (1), features (n*d, row-major), noise (n).
    """
    if n < 1 or d < 1 or noise_sigma < 0:
        raise ValueError("need n >= 1, d >= 1 and noise_sigma >= 0")
    rng = SplitMix64(seed)
    w_true = rng.normal(d)
    b_true = float(rng.normal(1)[0])
    X = rng.normal(n * d).reshape(n, d)
    noise = rng.normal(n)
    y = X @ w_true + b_true
    if noise_sigma:
        y = y + noise_sigma * noise
    return SyntheticDataset(X, y, seed, w_true, b_true, noise_sigma)


def local_gradient(model: LinearModel, X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Sum over the batch of per-sample squared-error gradients (not averaged)."""
    if len(y) == 0:
        return np.zeros_like(model.weights), 0.0
    residual = model.predict(X) - y
    return 2.0 * (X.T @ residual), float(2.0 * residual.sum())


def mse_loss(model: LinearModel, X: np.ndarray, y: np.ndarray) -> float:
    r = model.predict(X) - y
    return float(np.mean(r * r))


class SGD:
    """SGD with heavy-ball momentum; weight decay is added to the gradient."""

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: Optional[np.ndarray] = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        g = grad + self.weight_decay * params if self.weight_decay else grad
        if self.momentum:
            self._velocity = g.copy() if self._velocity is None else self.momentum * self._velocity + g
            g = self._velocity
        return params - self.lr * g


def initial_parameters(seed: int, d: int, scale: float = 0.01) -> np.ndarray:
    return scale * SplitMix64(seed ^ _INIT_SALT).normal(d + 1)


@dataclass
class TrainConfig:
    global_batch: int = 256
    epochs: int = 5
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    dispatch: str = "hybrid"  # or "direct-intra"
    probe_batch: int = DEFAULT_PROBE_BATCH
    probe_steps: int = DEFAULT_PROBE_STEPS
    bench_clock: str = "modeled"
    bench_timeout: float = 30.0

    def digest(self, dataset: Optional[SyntheticDataset] = None) -> str:
        blob = asdict(self)
        if dataset is not None:
            blob["dataset"] = [dataset.seed, len(dataset), dataset.dim, dataset.noise_sigma]
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()


@dataclass
class TrainReport:
    rank: int
    allocation: dict
    scores: dict
    steps: int
    epoch_wall: list = field(default_factory=list)
    epoch_modeled: list = field(default_factory=list)
    compute_modeled: float = 0.0
    comm_modeled: float = 0.0
    idle_modeled: float = 0.0
    losses: list = field(default_factory=list)
    initial_loss: float = 0.0
    final_loss: float = 0.0
    final_params: Optional[np.ndarray] = None
    config: dict = field(default_factory=dict)

    @property
    def total_wall(self) -> float:
        return float(sum(self.epoch_wall))

    @property
    def total_modeled(self) -> float:
        return float(sum(self.epoch_modeled))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["final_params"] = None if self.final_params is None else self.final_params.tolist()
        out["allocation"] = {str(k): v for k, v in self.allocation.items()}
        out["scores"] = {str(k): v for k, v in self.scores.items()}
        out["total_wall"] = self.total_wall
        out["total_modeled"] = self.total_modeled
        return out


def _digest_tensor(hexdigest: str) -> np.ndarray:
    # four 48-bit integers, exactly representable as doubles
    return np.array([float(int(hexdigest[i:i + 12], 16)) for i in range(0, 48, 12)])


def verify_config(ctx: G.CollectiveContext, digest: str) -> None:
    """Every rank compares its config digest with rank 0's; all fail together on mismatch."""
    mine = _digest_tensor(digest)
    reference = G.hetero_broadcast(ctx, mine, root=0)
    mismatch = 0.0 if np.array_equal(reference, mine) else 1.0
    bad = G.hetero_allreduce(ctx, [mismatch])[0]
    if bad:
        raise SetupError(f"configuration differs across ranks ({int(bad)} rank(s) disagree with rank 0)")


def modeled_comm_time(ctx_topology, devices: Sequence[DeviceDescriptor], n_elems: int,
                      dispatch: str = "hybrid") -> dict:
    """Host-copy seconds each rank is charged by one gradient allreduce."""
    out = {d.rank: 0.0 for d in devices}
    if dispatch == "hybrid" and len(ctx_topology.groups) > 1:
        by_rank = {d.rank: d for d in devices}
        for leader in ctx_topology.leaders:
            out[leader] = 2 * by_rank[leader].host_copy_time(8 * n_elems)
    return out


def _allreduce_fn(ctx: G.CollectiveContext, mode: str):
    if mode == "hybrid":
        return lambda t: G.hetero_allreduce(ctx, t)
    if mode == "direct-intra":
        if len(ctx.topology.groups) != 1:
            raise SetupError("direct-intra dispatch needs a single-kind world")
        world = ctx.topology.groups[0]
        return lambda t: G.intra_allreduce(ctx, world, t)
    raise SetupError(f"unknown dispatch mode {mode!r}")


def train(config: TrainConfig, ctx: G.CollectiveContext, devices: Sequence[DeviceDescriptor],
          dataset: SyntheticDataset, scores: ScoreTable | dict) -> TrainReport:
    """Run the synchronous training loop on this rank.

    Must be called by every rank with the same ``config``, ``dataset`` and
    ``scores``. Parameters stay bitwise identical on all ranks because each
    rank applies the same update to the same allreduced gradient.
    """
    rank = ctx.rank
    allreduce = _allreduce_fn(ctx, config.dispatch)
    verify_config(ctx, config.digest(dataset))

    if isinstance(scores, ScoreTable):
        scores = scores.scores
    alloc: BatchAllocation = allocate_batches(scores, config.global_batch)
    B = config.global_batch
    X, y = dataset.features, dataset.targets

    params = initial_parameters(config.seed, dataset.dim) if rank == 0 else np.zeros(dataset.dim + 1)
    params = G.hetero_broadcast(ctx, params, root=0)
    model = LinearModel.from_flat(params)
    opt = SGD(config.lr, config.momentum, config.weight_decay)

    compute_per_step = predicted_step_time(alloc, devices)
    comm_per_step = modeled_comm_time(ctx.topology, devices, dataset.dim + 1, config.dispatch)
    step_time = max(compute_per_step[r] + comm_per_step[r] for r in alloc.ranks())

    report = TrainReport(rank=rank, allocation=dict(alloc.sizes), scores=dict(scores),
                         steps=0, config=asdict(config))
    report.initial_loss = mse_loss(model, X, y)
    for epoch in range(config.epochs):
        start = time.perf_counter()
        steps = partition_indices(alloc, len(dataset), epoch, config.seed)
        for step in steps:
            idx = step.indices[rank]
            simulate_compute(ctx.device, len(idx))
            gw, gb = local_gradient(model, X[idx], y[idx])
            charged = ctx.stats.host_copy_seconds
            total = allreduce(np.concatenate([gw, [gb]]))
            report.comm_modeled += ctx.stats.host_copy_seconds - charged
            params = opt.step(params, total / B)
            model = LinearModel.from_flat(params)
        report.epoch_wall.append(time.perf_counter() - start)
        report.epoch_modeled.append(len(steps) * step_time)
        report.compute_modeled += len(steps) * compute_per_step[rank]
        report.steps += len(steps)
        report.losses.append(mse_loss(model, X, y))
        log.debug("rank %d epoch %d loss %.6g", rank, epoch, report.losses[-1])

    report.idle_modeled = max(0.0, report.total_modeled - report.compute_modeled - report.comm_modeled)
    report.final_loss = report.losses[-1] if report.losses else report.initial_loss
    report.final_params = params
    return report


def run_benchmark_phase(ctx: G.CollectiveContext, devices: Sequence[DeviceDescriptor],
                        config: TrainConfig, dataset: Optional[SyntheticDataset] = None) -> ScoreTable:
    """Profile this rank, publish the time, and derive the shared score table.

    Each rank stores its median probe time under ``bench/<rank>``, waits at a
    barrier, then reads every rank's time and computes scores itself.
    """
    if ctx.store is None:
        raise SetupError("benchmark phase needs a rendezvous client on the context")
    d = dataset.dim if dataset is not None else 32
    rng = SplitMix64(config.seed ^ _PROBE_SALT)
    Xp = rng.normal(config.probe_batch * d).reshape(config.probe_batch, d)
    yp = rng.normal(config.probe_batch)
    probe_model = LinearModel.zeros(d)

    def work(dev, n):
        modeled = simulate_compute(dev, n)
        local_gradient(probe_model, Xp[:n], yp[:n])
        return modeled

    elapsed = benchmark(ctx.device, config.probe_batch, config.probe_steps, work, clock=config.bench_clock)
    world = ctx.topology.world_size
    try:
        ctx.store.kv_put(f"bench/{ctx.rank}", pack_time(elapsed))
        ctx.store.barrier("bench", world, timeout=config.bench_timeout)
        times = {r: unpack_time(ctx.store.kv_get(f"bench/{r}", timeout=config.bench_timeout))
                 for r in range(world)}
    except (NotFoundError, RendezvousError) as exc:
        raise SetupError(f"benchmark exchange failed: {exc}") from exc
    return compute_scores(times)
