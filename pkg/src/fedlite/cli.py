"""Command-line front door: single runs and quantizer sweeps.

Configuration comes from a key=value file (see the README for the schema),
FEDLITE_<KEY> environment variables override the file, and the --seed,
--out-dir and --workers flags override both.  Exit codes: 0 success,
1 at least one sweep point failed, 2 configuration or data problems.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .federation import DatasetFormatError
from .harness import (
    ConfigError,
    apply_env_overrides,
    build_spec,
    parse_config_text,
    run_single,
    run_sweep,
)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True,
                     help="path to a key=value configuration file")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the configured seed")
    sub.add_argument("--out-dir", default=None,
                     help="override the configured output directory")
    sub.add_argument("--workers", type=int, default=None,
                     help="override the configured worker count")


def _load_spec(args):
    try:
        with open(args.config) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {args.config}: {exc}") from None
    mapping = parse_config_text(text, source=args.config)
    mapping = apply_env_overrides(mapping, os.environ)
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    if args.out_dir is not None:
        mapping["out_dir"] = args.out_dir
    if args.workers is not None:
        mapping["workers"] = str(args.workers)
    return build_spec(mapping)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedlite",
        description="Split training with product-quantized activation "
                    "exchange: single experiments and quantizer sweeps.")
    commands = parser.add_subparsers(dest="command", required=True)
    _add_common(commands.add_parser(
        "run", help="train once and write trace/ledger/eval/diagnostics"))
    _add_common(commands.add_parser(
        "sweep", help="train the quantizer grid and write sweep.csv"))
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        spec = _load_spec(args)
        if args.command == "run":
            summary = run_single(spec)
            print(f"accuracy {summary.accuracy:.4f}  loss {summary.loss:.4f}  "
                  f"kappa_max {summary.kappa_max:.4g}  -> {summary.out_dir}")
            return 0
        outcome = run_sweep(spec)
        print(f"{len(outcome.rows)} points written to "
              f"{os.path.join(spec.out_dir, 'sweep.csv')}"
              + (f", {len(outcome.failures)} failed" if outcome.failures else ""))
        return 1 if outcome.failures else 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DatasetFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
