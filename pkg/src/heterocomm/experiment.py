"""Experiment harness: configs, scenario presets, runs, comparisons, self-test.

Config files are TOML with flat top-level keys and one ``[[device]]`` table
per simulated device::

    scenario = "hetero-1fast-1slow"
    seed = 0                 # master seed: shuffling and initial parameters
    global_batch = 256
    epochs = 5
    allocation = "adaptive"  # "adaptive" | "equal" | "fixed:0.6,0.4"
    dispatch = "hybrid"      # "hybrid" | "direct-intra"
    n = 4096                 # dataset samples
    d = 32                   # features
    noise_sigma = 0.1
    lr = 0.05
    momentum = 0.9
    weight_decay = 5e-4

    [[device]]
    kind = "sim-gpu"
    speed_factor = 1.0
    seconds_per_sample = 200e-6
    copy_latency = 50e-6
    copy_bandwidth = 10e9

Optional keys: ``data_seed`` (defaults to ``seed``), ``probe_batch``,
``probe_steps``, ``bench_clock`` ("modeled" or "wall"), ``timeout``, ``out``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .device import (
    DEFAULT_COPY_BANDWIDTH,
    DEFAULT_COPY_LATENCY,
    DEFAULT_PROBE_BATCH,
    DEFAULT_PROBE_STEPS,
    DEFAULT_SECONDS_PER_SAMPLE,
    DeviceDescriptor,
    ScoreTable,
)
from .errors import ConfigError, ExperimentError
from .launch import run_world
from .train import TrainConfig, TrainReport, generate_dataset, run_benchmark_phase, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


@dataclass
class DeviceSpec:
    kind: str = "sim-gpu"
    speed_factor: float = 1.0
    seconds_per_sample: float = DEFAULT_SECONDS_PER_SAMPLE
    copy_latency: float = DEFAULT_COPY_LATENCY
    copy_bandwidth: float = DEFAULT_COPY_BANDWIDTH


@dataclass
class ExperimentConfig:
    scenario: str = "custom"
    devices: list = field(default_factory=lambda: [DeviceSpec()])
    seed: int = 0
    data_seed: Optional[int] = None
    global_batch: int = 256
    epochs: int = 5
    n: int = 4096
    d: int = 32
    noise_sigma: float = 0.1
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    allocation: str = "adaptive"
    dispatch: str = "hybrid"
    probe_batch: int = DEFAULT_PROBE_BATCH
    probe_steps: int = DEFAULT_PROBE_STEPS
    bench_clock: str = "modeled"
    timeout: float = 30.0
    out: Optional[str] = None

    def resolved(self) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, devices=[dataclasses.replace(d) for d in self.devices])
        if cfg.data_seed is None:
            cfg.data_seed = cfg.seed
        return cfg

    def fixed_ratios(self) -> Optional[list]:
        if not self.allocation.startswith("fixed:"):
            return None
        try:
            return [float(x) for x in self.allocation[len("fixed:"):].split(",")]
        except ValueError:
            raise ConfigError(f"cannot parse ratios in {self.allocation!r}") from None

    def validate(self) -> None:
        if not self.devices:
            raise ConfigError("device list is empty")
        for i, dev in enumerate(self.devices):
            try:
                DeviceDescriptor(i, dev.kind, dev.speed_factor, dev.copy_latency,
                                 dev.copy_bandwidth, dev.seconds_per_sample)
            except ValueError as exc:
                raise ConfigError(f"device {i}: {exc}") from None
        if self.allocation not in ("adaptive", "equal"):
            ratios = self.fixed_ratios()
            if ratios is None:
                raise ConfigError(f"unknown allocation mode {self.allocation!r}")
            if len(ratios) != len(self.devices):
                raise ConfigError(f"{len(ratios)} ratios given for {len(self.devices)} devices")
            if any(not (r > 0 and math.isfinite(r)) for r in ratios):
                raise ConfigError("fixed ratios must be positive")
            if abs(math.fsum(ratios) - 1.0) > 1e-9:
                raise ConfigError(f"fixed ratios sum to {math.fsum(ratios)}, not 1")
        if self.dispatch not in ("hybrid", "direct-intra"):
            raise ConfigError(f"unknown dispatch mode {self.dispatch!r}")
        if self.dispatch == "direct-intra" and len({d.kind for d in self.devices}) != 1:
            raise ConfigError("direct-intra dispatch is only valid when all devices share one kind")
        if self.global_batch < 1 or self.epochs < 1 or self.d < 1:
            raise ConfigError("global_batch, epochs and d must all be >= 1")
        if self.n < self.global_batch:
            raise ConfigError(f"dataset size {self.n} is smaller than the global batch {self.global_batch}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.bench_clock not in ("modeled", "wall"):
            raise ConfigError(f"unknown bench_clock {self.bench_clock!r}")

    def descriptors(self) -> list:
        return [DeviceDescriptor(i, d.kind, d.speed_factor, d.copy_latency, d.copy_bandwidth,
                                 d.seconds_per_sample) for i, d in enumerate(self.devices)]

    def train_config(self) -> TrainConfig:
        return TrainConfig(global_batch=self.global_batch, epochs=self.epochs, lr=self.lr,
                           momentum=self.momentum, weight_decay=self.weight_decay, seed=self.seed,
                           dispatch=self.dispatch, probe_batch=self.probe_batch,
                           probe_steps=self.probe_steps, bench_clock=self.bench_clock,
                           bench_timeout=self.timeout)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        device_rows = raw.pop("device", raw.pop("devices", None))
        known = {f.name for f in dataclasses.fields(cls)} - {"devices"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        devices = []
        dev_keys = {f.name for f in dataclasses.fields(DeviceSpec)}
        for i, row in enumerate(device_rows or []):
            bad = set(row) - dev_keys
            if bad:
                raise ConfigError(f"device {i}: unknown keys {sorted(bad)}")
            devices.append(DeviceSpec(**row))
        try:
            cfg = cls(devices=devices, **raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_toml(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if key == "devices" or value is None:
                continue
            lines.append(f"{key} = {json.dumps(value)}")
        for dev in self.devices:
            lines.append("")
            lines.append("[[device]]")
            for key, value in dataclasses.asdict(dev).items():
                lines.append(f"{key} = {json.dumps(value)}")
        return "\n".join(lines) + "\n"


def _params_sha256(params: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(params, dtype="<f8").tobytes()).hexdigest()


@dataclass
class ExperimentReport:
    config: dict
    scores: dict
    allocation: dict
    ranks: list  # TrainReport per rank
    wall_seconds: float
    benchmark_wall_seconds: float

    @property
    def modeled_seconds(self) -> float:
        return self.ranks[0].total_modeled

    @property
    def final_loss(self) -> float:
        return self.ranks[0].final_loss

    @property
    def params_consistent(self) -> bool:
        ref = self.ranks[0].final_params
        return all(np.array_equal(r.final_params, ref) for r in self.ranks)

    def to_dict(self) -> dict:
        head = self.ranks[0]
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "scenario": self.config["scenario"],
            "config": self.config,
            "scores": {str(k): v for k, v in self.scores.items()},
            "allocation": {str(k): v for k, v in self.allocation.items()},
            "wall_seconds": self.wall_seconds,
            "benchmark_wall_seconds": self.benchmark_wall_seconds,
            "modeled_seconds": self.modeled_seconds,
            "epoch_wall_seconds": head.epoch_wall,
            "epoch_modeled_seconds": head.epoch_modeled,
            "losses": head.losses,
            "initial_loss": head.initial_loss,
            "final_loss": self.final_loss,
            "final_params_sha256": _params_sha256(head.final_params),
            "params_consistent": self.params_consistent,
            "ranks": [r.to_dict() for r in self.ranks],
        }


def _scores_for(cfg: ExperimentConfig) -> Optional[dict]:
    n = len(cfg.devices)
    if cfg.allocation == "equal":
        return {r: 1.0 for r in range(n)}
    ratios = cfg.fixed_ratios()
    if ratios is not None:
        return dict(enumerate(ratios))
    return None


def write_json(data: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=False)
        fh.write("\n")


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Rendezvous one worker per device, benchmark if adaptive, train, report."""
    cfg = config.resolved()
    cfg.validate()
    dataset = generate_dataset(cfg.data_seed, cfg.n, cfg.d, cfg.noise_sigma)
    devices = cfg.descriptors()
    tcfg = cfg.train_config()
    fixed_scores = _scores_for(cfg)

    def worker(ctx):
        start = time.perf_counter()
        if fixed_scores is None:
            scores = run_benchmark_phase(ctx, devices, tcfg, dataset)
        else:
            scores = ScoreTable(dict(fixed_scores))
        bench_wall = time.perf_counter() - start
        report = train(tcfg, ctx, devices, dataset, scores)
        return report, bench_wall

    log.info("running %s on %d device(s)", cfg.scenario, len(devices))
    results = run_world(devices, worker, timeout=cfg.timeout)
    reports: list[TrainReport] = [r for r, _ in results]
    report = ExperimentReport(
        config=cfg.to_dict(),
        scores=dict(reports[0].scores),
        allocation=dict(reports[0].allocation),
        ranks=reports,
        wall_seconds=max(r.total_wall for r in reports),
        benchmark_wall_seconds=max(b for _, b in results),
    )
    if cfg.out:
        write_json(report.to_dict(), cfg.out)
    return report


def compare_scenarios(configs: Sequence[ExperimentConfig], repeats: int = 1,
                      out: Optional[str] = None) -> dict:
    """Run every config (``repeats`` times, interleaved) and compare against the first.

    Speedup is baseline time / candidate time; overhead is the candidate's
    extra wall time as a percentage of the baseline's.
    """
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configs")
    resolved = [c.resolved() for c in configs]
    seeds = {(c.data_seed, c.n, c.d, c.noise_sigma) for c in resolved}
    if len(seeds) != 1:
        raise ConfigError("compared configs must share the same dataset")
    for c in resolved:
        c.validate()
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")

    runs: list[list[ExperimentReport]] = [[] for _ in resolved]
    for _ in range(repeats):
        for i, c in enumerate(resolved):
            runs[i].append(run_experiment(dataclasses.replace(c, out=None)))

    summaries = []
    for c, reps in zip(resolved, runs):
        summaries.append({
            "scenario": c.scenario,
            "wall_seconds": statistics.fmean(r.wall_seconds for r in reps),
            "wall_seconds_each": [r.wall_seconds for r in reps],
            "modeled_seconds": reps[0].modeled_seconds,
            "final_loss": reps[0].final_loss,
            "report": reps[0].to_dict(),
        })
    base = summaries[0]
    pairs = []
    for cand in summaries[1:]:
        pairs.append({
            "baseline": base["scenario"],
            "candidate": cand["scenario"],
            "speedup_wall": base["wall_seconds"] / cand["wall_seconds"],
            "speedup_modeled": base["modeled_seconds"] / cand["modeled_seconds"],
            "loss_delta": cand["final_loss"] - base["final_loss"],
            "overhead_percent": 100.0 * (cand["wall_seconds"] - base["wall_seconds"]) / base["wall_seconds"],
        })
    result = {"schema_version": REPORT_SCHEMA_VERSION, "repeats": repeats,
              "runs": summaries, "comparisons": pairs}
    if out:
        write_json(result, out)
    return result


# presets --------------------------------------------------------------

FAST = DeviceSpec(kind="sim-gpu", speed_factor=1.0)
SLOW = DeviceSpec(kind="sim-mlu", speed_factor=0.5)


def _cfg(scenario, devices, **kw) -> ExperimentConfig:
    return ExperimentConfig(scenario=scenario, devices=[dataclasses.replace(d) for d in devices], **kw)


PRESETS: dict[str, Callable[..., list]] = {
    "scalability": lambda **kw: [
        _cfg("1fast", [FAST], **kw),
        _cfg("1fast+1slow", [FAST, SLOW], **kw),
        _cfg("2fast+2slow", [FAST, FAST, SLOW, SLOW], **kw),
    ],
    "load-adaptive": lambda **kw: [
        _cfg("equal-split", [FAST, SLOW], allocation="equal", **kw),
        _cfg("adaptive", [FAST, SLOW], allocation="adaptive", **kw),
        _cfg("fixed-0.8/0.2", [FAST, SLOW], allocation="fixed:0.8,0.2", **kw),
    ],
    "overhead": lambda **kw: [
        _cfg("direct-intra", [FAST, FAST], dispatch="direct-intra", **kw),
        _cfg("hybrid-dispatch", [FAST, FAST], dispatch="hybrid", **kw),
    ],
}


def preset(name: str, **overrides) -> list:
    try:
        return PRESETS[name](**overrides)
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# self-test ------------------------------------------------------------

def selftest(inject_fault: bool = False, echo: Callable[[str], None] = print, seed: int = 1234) -> bool:
    """Run a compact invariant suite in-process and print one line per check."""
    from . import group as G
    from .errors import HeteroCommError
    from .sched import allocate_batches, partition_indices, quotas
    from .wire import MsgType, decode_frame, decode_tensor, encode_frame, encode_tensor

    rng = np.random.default_rng(seed)
    checks: list[tuple[str, Callable[[], None]]] = []

    def check(name):
        def deco(fn):
            checks.append((name, fn))
            return fn
        return deco

    @check("wire frame roundtrip x1000")
    def _():
        types = list(MsgType)
        for i in range(1000):
            mt = types[i % len(types)]
            payload = rng.bytes(int(rng.integers(0, 300)))
            frame = encode_frame(mt, payload)
            if inject_fault and i == 500:
                frame = b"\xff" + frame[1:]
            got = decode_frame(frame)
            assert got == (mt, payload), f"frame {i} did not roundtrip"

    @check("wire tensor roundtrip x1000")
    def _():
        for _ in range(1000):
            t = rng.standard_normal(int(rng.integers(0, 64))) * 10.0 ** rng.integers(-300, 300)
            t = t[np.isfinite(t)]
            assert decode_tensor(encode_tensor(t)).tobytes() == t.tobytes()

    @check("wire rejects malformed frames")
    def _():
        for bad in (b"\xff\x01\x09\x00\x00\x00\x00", b"\x4b\x02\x09\x00\x00\x00\x00",
                    b"\x4b\x01\x63\x00\x00\x00\x00", b"\x4b\x01\x08\x05\x00\x00\x00ab"):
            try:
                decode_frame(bad)
            except HeteroCommError:
                continue
            raise AssertionError(f"accepted malformed frame {bad!r}")

    @check("allocation properties x1000")
    def _():
        for _ in range(1000):
            k = int(rng.integers(1, 9))
            scores = {r: float(rng.uniform(0.05, 1.0)) for r in range(k)}
            B = int(rng.integers(1, 2049))
            alloc = allocate_batches(scores, B)
            assert sum(alloc.sizes.values()) == B
            q = quotas(scores, B)
            for r in range(k):
                assert math.floor(q[r] - 1e-9) <= alloc.sizes[r] <= math.ceil(q[r] + 1e-9)
        assert allocate_batches({0: 1.0, 1: 0.7}, 256).sizes == {0: 151, 1: 105}

    @check("sampler determinism and partition")
    def _():
        alloc = allocate_batches({0: 1.0, 1: 0.7}, 256)
        a = partition_indices(alloc, 4096, epoch=3, seed=7)
        b = partition_indices(alloc, 4096, epoch=3, seed=7)
        assert len(a) == 16
        for sa, sb in zip(a, b):
            assert all(np.array_equal(sa.indices[r], sb.indices[r]) for r in (0, 1))
            both = np.concatenate([sa.indices[0], sa.indices[1]])
            assert len(np.unique(both)) == 256

    @check("4-rank hetero allreduce oracle")
    def _():
        devs = [DeviceDescriptor(r, k) for r, k in enumerate(["sim-gpu", "sim-gpu", "sim-mlu", "sim-mlu"])]
        data = [rng.standard_normal(4096) for _ in devs]
        out = run_world(devs, lambda ctx: G.hetero_allreduce(ctx, data[ctx.rank]), timeout=10.0)
        oracle = (data[0] + data[1]) + (data[2] + data[3])
        assert all(o.tobytes() == oracle.tobytes() for o in out)

    ok = True
    start = time.perf_counter()
    for name, fn in checks:
        try:
            fn()
            echo(f"PASS  {name}")
        except (AssertionError, HeteroCommError, ExperimentError) as exc:
            ok = False
            echo(f"FAIL  {name}: {exc}")
    echo(f"selftest {'passed' if ok else 'FAILED'} in {time.perf_counter() - start:.2f}s")
    return ok
