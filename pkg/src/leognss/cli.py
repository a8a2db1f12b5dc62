"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    NUMERICAL_ERRORS,
    ConfigError,
    emit_ablation,
    emit_comparison,
    emit_geometry,
    load_config,
    run_ablation,
    run_comparison,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leognss",
        description="Decentralized LEO-constellation GNSS network estimation experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "compare": "standalone vs network-float vs network-fixed on one epoch",
        "ablate": "gradient-tracking variant ablation (vanilla, momentum, consensus, combined)",
        "geometry": "write geometry, observations and the estimable-parameter table",
        "validate-config": "parse and validate a configuration, then print it",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, default=None, help="YAML or JSON configuration file")
        p.add_argument("--seed", type=_seed, default=None, help="override the configured seed")
        p.add_argument("--scale", choices=("desk", "paper"), default="desk")
        if name != "validate-config":
            p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.scale, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "validate-config":
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            return EXIT_OK
        if args.command == "compare":
            report = emit_comparison(run_comparison(cfg), args.out)
            for name, v in report["strategies"].items():
                print(f"{name:14s} orbit {v['orbit_rmse_m']:.4f} m   clock {v['clock_rmse_s'] * 1e9:.4f} ns")
        elif args.command == "ablate":
            report = emit_ablation(run_ablation(cfg), args.out)
            for name, v in report["variants"].items():
                print(f"{name:10s} iterations to MSD 1e-6: {v['iterations_to_msd_1e-6']}  "
                      f"final MSD {v['final_msd']}")
        elif args.command == "geometry":
            report = emit_geometry(cfg, args.out)
            sc = report["scenario"]
            print(f"L={sc['L']} G={sc['G']} visible min {sc['visible_min']} mean {sc['visible_mean']:.2f}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure ({type(exc).__module__.rsplit('.', 1)[-1]}): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
