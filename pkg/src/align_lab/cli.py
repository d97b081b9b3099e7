"""Command line: ``align-lab run|check|list``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields

from .checks import GROUPS, run_checks
from .errors import AlignLabError
from .experiments import REGISTRY, ExperimentSpec, run

# CLI flag -> ExperimentSpec field
RUN_FLAGS = {"experiment": "name", "seed": "seed", "steps": "steps", "lr": "lr",
             "loss_stop": "loss_stop", "data_dir": "data_path", "out": "out_dir",
             "record_every": "record_every"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="align-lab", description="Alignment experiments for deep linear networks.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one registry experiment")
    r.add_argument("--experiment", choices=sorted(REGISTRY))
    r.add_argument("--seed", type=int)
    r.add_argument("--steps", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--loss-stop", type=float)
    r.add_argument("--record-every", type=int)
    r.add_argument("--data-dir", help="directory with MNIST IDX files (default $ALIGN_LAB_DATA_DIR)")
    r.add_argument("--config", help="JSON file of run settings; flags given on the command line win")
    r.add_argument("--out", help="output directory (default runs/<experiment>-seed<seed>)")

    c = sub.add_parser("check", help="run acceptance checks")
    c.add_argument("group", nargs="?", default="all", choices=["all", *GROUPS])

    sub.add_parser("list", help="list registry experiments")
    return p


def _spec_from(args) -> ExperimentSpec:
    settings = {}
    if args.config:
        with open(args.config) as fh:
            loaded = json.load(fh)
        known = {f.name for f in fields(ExperimentSpec)}
        unknown = sorted(set(loaded) - known - set(RUN_FLAGS))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in loaded.items():
            settings[RUN_FLAGS.get(key, key)] = value
    for flag, field_name in RUN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            settings[field_name] = value
    if "name" not in settings:
        raise ValueError("no experiment given (use --experiment or an 'experiment' key in --config)")
    settings.setdefault("out_dir", f"runs/{settings['name']}-seed{settings.get('seed', 0)}")
    return ExperimentSpec(**settings)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list":
        for name, exp in REGISTRY.items():
            print(f"{name:15s} {exp.description}")
        return 0
    if args.command == "check":
        results = run_checks(args.group)
        failed = [r for r in results if not r.passed]
        print(f"{len(results) - len(failed)}/{len(results)} checks passed")
        return 1 if failed else 0
    try:
        spec = _spec_from(args)
        report = run(spec)
    except (AlignLabError, ValueError, OSError) as exc:
        print(f"align-lab: error: {exc}", file=sys.stderr)
        return 2
    status = "converged" if report.trace.converged else "stopped at step cap"
    print(f"{spec.name}: {status} after {report.trace.steps[-1]} steps, loss {report.trace.losses[-1]:.3e}")
    for path in report.files:
        print(f"  wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
