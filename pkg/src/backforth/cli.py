"""Command-line entry point: ``backforth --config run.json <command>``.

Exit codes: 0 success, 1 fatal runtime error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from backforth.config import ConfigError, load_config
from backforth.ledger import Ledger, LedgerError
from backforth.pipeline import (
    STAGES,
    ledger_status,
    prepare_seed_files,
    run_all,
    run_stage,
)

logger = logging.getLogger("backforth")

EXIT_OK, EXIT_FATAL, EXIT_CONFIG = 0, 1, 2


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", type=Path, default=d(None), help="pipeline JSON config")
    parser.add_argument("--resume", action="store_true", default=d(False), help="continue an existing ledger with `run`")
    parser.add_argument("--force", action="store_true", default=d(False), help="resume a ledger written under another config")
    parser.add_argument("--strict", action="store_true", default=d(False), help="treat malformed records as fatal")
    parser.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="backforth", description="Instruction back-and-forth translation pipeline")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "ingest": "stream, length-filter and sample corpus documents into the ledger",
        "backtranslate": "generate instructions with the backward model",
        "score": "score (instruction, response) pairs with the forward model",
        "filter": "keep only score-5 pairs",
        "rewrite": "rewrite responses with the aligned model",
        "distill": "answer instructions directly with the aligned model",
        "build": "assemble and export the fine-tuning datasets",
        "analyze": "write the dataset quality report",
    }
    for stage in STAGES:
        _global_flags(sub.add_parser(stage, help=helps[stage]), suppress=True)
    _global_flags(sub.add_parser("run", help="run every enabled stage in order"), suppress=True)
    _global_flags(sub.add_parser("status", help="summarize the ledger"), suppress=True)
    _global_flags(sub.add_parser("prepare-seeds", help="write forward/backward seed training files"), suppress=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.config is None:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "status":
            result = ledger_status(cfg.paths.ledger)
        elif args.command == "prepare-seeds":
            if not cfg.seed_data.path:
                print("config error: seed_data.path is not set", file=sys.stderr)
                return EXIT_CONFIG
            result = prepare_seed_files(cfg)
        elif args.command == "run":
            ledger = Path(cfg.paths.ledger)
            if ledger.exists() and ledger.stat().st_size and not args.resume:
                print(f"error: {ledger} already exists; pass --resume to continue it", file=sys.stderr)
                return EXIT_FATAL
            result = run_all(cfg, force=args.force, strict=args.strict)
        else:
            with Ledger(cfg.paths.ledger, cfg.config_hash(), force=args.force) as ledger:
                result = run_stage(cfg, args.command, ledger, strict=args.strict).to_dict()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LedgerError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except Exception as exc:  # noqa: BLE001
        logger.exception("unexpected failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
