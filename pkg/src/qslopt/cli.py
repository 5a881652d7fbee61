"""Command-line entry point.

Subcommands: lz-convergence, lz-qsl-compare, chain-scan, chain-bounds and
validate-config. Exit codes: 0 success, 2 config error, 3 all runs failed,
4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

import yaml

from . import __version__
from .harness import (
    ConfigError,
    apply_overrides,
    default_jobs,
    dump_config,
    parse_config,
    run_experiment,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ALL_FAILED = 3
EXIT_IO = 4

COMMANDS = {
    "lz-convergence": "lz-convergence",
    "lz-qsl-compare": "lz-qsl-compare",
    "chain-scan": "chain-threshold-scan",
    "chain-bounds": "chain-bound-compare",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qslopt", description="Krotov optimal control and quantum speed limit experiments."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["validate-config"]:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment description")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--jobs", type=int, default=None, help="worker processes (default: available cores)")
        p.add_argument("--quiet", action="store_true", help="only report warnings and errors")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. optimizer.max_iterations=200")
    return parser


def _load(args: argparse.Namespace, kind: str | None):
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.config}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{args.config}: not valid YAML ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    overrides = list(args.overrides)
    if args.out is not None:
        overrides.append(f"output.dir={args.out}")
    raw = apply_overrides(raw, overrides)
    return parse_config(raw, kind)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.jobs is not None and args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    kind = COMMANDS.get(args.command)
    try:
        cfg = _load(args, kind)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate-config":
        if not args.quiet:
            sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    jobs = args.jobs or default_jobs()
    try:
        result = run_experiment(cfg, jobs=jobs)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if not args.quiet:
        print(f"{cfg.experiment}: wrote {len(result.files)} files to {result.out_dir}")
    if result.all_failed:
        print("all runs failed", file=sys.stderr)
        return EXIT_ALL_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
