"""Command-line entry point.

Usage:
    adml [--config PATH] [--preset NAME] --out DIR [--seed N ...]
         [--threads N] COMMAND

COMMAND is one of: gen-data, train, eval, attack, certify, sweep-rate,
sweep-target, sweep-attack.  A preset provides the base document; --config
text is applied on top of it.  ADML_THREADS is honored when --threads is
absent.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import PRESET_NAMES, parse_config, preset_text
from .runner import COMMANDS, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adml",
        description="Train, attack, evaluate and certify deep metric embedding models.",
    )
    parser.add_argument("command", choices=COMMANDS, help="pipeline stage to run")
    parser.add_argument("--config", type=Path, default=None,
                        help="experiment config file (key = value lines)")
    parser.add_argument("--preset", choices=PRESET_NAMES, default=None,
                        help="named base configuration")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--seed", type=int, action="append", default=None,
                        help="seed to run (repeatable; defaults to run.seeds)")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (fallback: ADML_THREADS, then run.threads)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.config is None and args.preset is None:
        build_parser().error("at least one of --config or --preset is required")
    text = ""
    if args.preset is not None:
        text += preset_text(args.preset)
    if args.config is not None:
        text += "\n" + args.config.read_text()
    try:
        cfg = parse_config(text)
    except ValueError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 2
    return run_experiment(cfg, args.command, args.out, seeds=args.seed,
                          threads=args.threads)


if __name__ == "__main__":
    sys.exit(main())
