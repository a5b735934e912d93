"""Command-line entry point.

Subcommands: generate, train, evaluate, uncertainty, report. Exit codes:
0 success, 1 usage error, 2 data/validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from .errors import NumericalError, ValidationError
from .experiment import (
    ExperimentConfig,
    cmd_evaluate,
    cmd_generate,
    cmd_report,
    cmd_train,
    cmd_uncertainty,
    format_table,
    load_config,
)
from .federation import AlgorithmKind

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1, not argparse's default 2
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="fuala", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "generate the synthetic cohort and print its statistics"),
        ("train", "train the configured algorithms over all repeats"),
        ("evaluate", "score trained models on held-out hospitals"),
        ("uncertainty", "emit ensemble uncertainty reports for FUALA runs"),
        ("report", "aggregate evaluation results into a markdown table"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="experiment config JSON")
        p.add_argument("--out", metavar="DIR", default="out", help="output directory")
        p.add_argument("--seed", type=int, metavar="N", help="override the master seed")
        p.add_argument(
            "--algo",
            metavar="LIST",
            help="comma-separated algorithms "
            f"({','.join(a.value for a in AlgorithmKind)})",
        )
        p.add_argument(
            "--parallel", type=int, metavar="N", default=1, help="parallel repeat workers"
        )
    return parser


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides: dict = {}
    if args.seed is not None:
        if args.seed < 0:
            raise _UsageError(f"--seed must be >= 0, got {args.seed}")
        overrides["seed"] = args.seed
    if args.algo:
        try:
            overrides["algorithms"] = tuple(
                AlgorithmKind(name.strip()) for name in args.algo.split(",") if name.strip()
            )
        except ValueError as exc:
            raise _UsageError(f"unknown algorithm in --algo: {exc}") from exc
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.parallel < 1:
            raise _UsageError(f"--parallel must be >= 1, got {args.parallel}")
        cfg = _resolve_config(args)

        if args.command == "generate":
            path, summary = cmd_generate(cfg, args.out)
            print(f"cohort written to {path}")
            print(summary)
        elif args.command == "train":
            dirs = cmd_train(cfg, args.out, parallel=args.parallel)
            print(f"trained {len(dirs)} runs under {args.out}")
        elif args.command == "evaluate":
            summaries = cmd_evaluate(cfg, args.out)
            print(format_table(summaries))
        elif args.command == "uncertainty":
            paths = cmd_uncertainty(cfg, args.out)
            print(f"wrote {len(paths)} uncertainty files")
        elif args.command == "report":
            print(cmd_report(cfg, args.out))
        return EXIT_OK
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
