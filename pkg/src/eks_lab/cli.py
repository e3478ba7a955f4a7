"""Command-line front end.

    eks-lab <subcommand> --config <path> --out <dir> [--seed <u64>]
            [--threads <n>]

Subcommands name the study kind (sample, study-j, study-time,
study-coupling, demo-nonlinear, validate); the config file's own "kind"
must match.  --seed overrides the config's base seed, --threads sets the
sweep-cell worker count (env EKS_LAB_THREADS is the fallback).  Outputs
land in --out: report.json plus the study CSVs.

Exit codes: 0 success, 1 a pre-registered acceptance band failed (or a
validate check did), 2 usage or configuration error.
"""

import argparse
import dataclasses
import os
import sys

from . import __version__
from .errors import EksError
from .studies import STUDY_KINDS, ConfigError, load_config, run_study

EXIT_OK = 0
EXIT_BAND_FAILURE = 1
EXIT_USAGE = 2


def build_parser():
    parser = argparse.ArgumentParser(
        prog="eks-lab",
        description="Ensemble Kalman sampling studies: run a configured "
                    "experiment and write report.json + CSVs.")
    parser.add_argument("--version", action="version",
                        version=f"eks-lab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in STUDY_KINDS:
        p = sub.add_parser(kind, help=f"run a '{kind}' study")
        p.add_argument("--config", required=True,
                       help="JSON study configuration")
        p.add_argument("--out", required=True,
                       help="output directory (created if missing)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's base seed")
        p.add_argument("--threads", type=int, default=None,
                       help="concurrent sweep cells "
                            "(default: env EKS_LAB_THREADS or 1)")
    return parser


def _resolve_threads(arg_value):
    if arg_value is not None:
        value = arg_value
    else:
        env = os.environ.get("EKS_LAB_THREADS", "")
        try:
            value = int(env) if env else 1
        except ValueError:
            raise ConfigError(
                f"EKS_LAB_THREADS must be an integer, got {env!r}") from None
    if value < 1:
        raise ConfigError(f"--threads must be >= 1, got {value}")
    return value


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = _resolve_threads(args.threads)
        cfg = load_config(args.config)
        if cfg.kind != args.command:
            raise ConfigError(
                f"config kind {cfg.kind!r} does not match subcommand "
                f"{args.command!r}")
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = dataclasses.replace(cfg, seed=args.seed)
    except ConfigError as err:
        print(f"eks-lab: config error: {err}", file=sys.stderr)
        return EXIT_USAGE

    try:
        report = run_study(cfg, out_dir=args.out, threads=threads)
    except EksError as err:
        print(f"eks-lab: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_BAND_FAILURE

    for name, ok in sorted(report.flags.items()):
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    if report.kind == "validate":
        for cell in report.cells:
            status = "ok" if cell.value == 1.0 else "FAILED"
            print(f"  check {cell.metric}: {status}")
        for name, detail in report.summary.get("failures", {}).items():
            print(f"  {name}: {detail}", file=sys.stderr)
    if not report.passed:
        print("eks-lab: one or more acceptance bands failed",
              file=sys.stderr)
        return EXIT_BAND_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
