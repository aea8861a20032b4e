"""Command line entry point: ``heterocomm run|compare|preset|selftest``.

Set ``HETEROCOMM_LOG`` (DEBUG, INFO, WARNING, ...) to change log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import ConfigError, ExperimentError
from .experiment import (
    PRESETS,
    ExperimentConfig,
    compare_scenarios,
    preset,
    run_experiment,
    selftest,
)


def _summary(report) -> dict:
    return {
        "scenario": report.config["scenario"],
        "allocation": report.allocation,
        "wall_seconds": round(report.wall_seconds, 4),
        "modeled_seconds": round(report.modeled_seconds, 6),
        "final_loss": report.final_loss,
    }


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    report = run_experiment(cfg)
    print(json.dumps(_summary(report)))
    return 0


def _print_comparison(result) -> None:
    for pair in result["comparisons"]:
        print(f"{pair['candidate']} vs {pair['baseline']}: "
              f"speedup wall {pair['speedup_wall']:.3f}, modeled {pair['speedup_modeled']:.3f}, "
              f"overhead {pair['overhead_percent']:+.2f}%, loss delta {pair['loss_delta']:.3g}")


def _cmd_compare(args) -> int:
    configs = [ExperimentConfig.load(p) for p in args.config]
    result = compare_scenarios(configs, repeats=args.repeats, out=args.out)
    _print_comparison(result)
    return 0


def _cmd_preset(args) -> int:
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    configs = preset(args.name, **overrides)
    if args.write_configs:
        os.makedirs(args.write_configs, exist_ok=True)
        for cfg in configs:
            path = os.path.join(args.write_configs, f"{cfg.scenario.replace('/', '_')}.toml")
            with open(path, "w") as fh:
                fh.write(cfg.to_toml())
        return 0
    result = compare_scenarios(configs, repeats=args.repeats, out=args.out)
    _print_comparison(result)
    return 0


def _cmd_selftest(args) -> int:
    return 0 if selftest(inject_fault=args.inject_fault) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heterocomm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="run configs back to back; the first is the baseline")
    p.add_argument("--config", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("preset", help="run a named scenario preset")
    p.add_argument("name", choices=sorted(PRESETS))
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--write-configs", metavar="DIR", help="only write the preset's TOML configs to DIR")
    p.set_defaults(func=_cmd_preset)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.add_argument("--inject-fault", action="store_true", help="corrupt one frame (negative control)")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("HETEROCOMM_LOG", "WARNING").upper(),
                        format="%(asctime)s %(threadName)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ExperimentError as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
