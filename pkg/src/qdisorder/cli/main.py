"""``qdisorder`` command line.

Usage::

    qdisorder error-benchmark --preset fig2-desk --workers 8 --out-dir out/fig2
    qdisorder transition-scan --config my_scan.yaml --seed 3
    qdisorder presets
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import EXPERIMENTS, ConfigError, load_config, load_preset, preset_names
from .experiments import run_experiment

logger = logging.getLogger("qdisorder")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qdisorder", description="Disordered driven-dissipative lattice experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="YAML experiment config")
        src.add_argument("--preset", help="name of a bundled preset (see `qdisorder presets`)")
        p.add_argument("--seed", type=int, default=None, help="override master_seed")
        p.add_argument("--workers", type=int, default=None, help="worker processes (results do not depend on it)")
        p.add_argument("--out-dir", default=None, help="output directory")
    sub.add_parser("presets", help="list bundled presets")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "presets":
        print("\n".join(preset_names()))
        return 0
    overrides = {"seed": args.seed, "workers": args.workers, "out_dir": args.out_dir}
    try:
        cfg = load_config(args.config, **overrides) if args.config else load_preset(args.preset, **overrides)
        if cfg.experiment != args.command:
            raise ConfigError(f"config describes a {cfg.experiment!r} experiment, not {args.command!r}")
        if cfg.workers < 1:
            raise ConfigError("--workers must be at least 1")
        report = run_experiment(cfg)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    summary = {k: v for k, v in report.items() if k not in ("provenance",)}
    print(json.dumps({"out_dir": cfg.out_dir, "files": summary.pop("files")}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
