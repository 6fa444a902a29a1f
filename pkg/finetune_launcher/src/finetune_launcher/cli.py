"""Command-line entry point for the fine-tuning bridge.

Exit codes follow the pipeline CLI's convention: 0 success, 2 bad
arguments or unknown model choice, 3 unusable dataset or missing
artifact, 4 trainer launch failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .dataset import validate_dataset
from .launch import DryRunPlan, launch
from .trainer_config import (
    HYPERPARAMETER_DEFAULTS,
    MODEL_CHOICES,
    LauncherError,
    emit_config,
)

EXIT_OK = 0
EXIT_ARGS = 2
EXIT_DATASET = 3
EXIT_TRAINER = 4


def _parse_overrides(pairs: list[str]) -> dict[str, object]:
    overrides: dict[str, object] = {}
    for pair in pairs:
        if "=" not in pair:
            raise LauncherError(f"expected FIELD=VALUE, got {pair!r}")
        name, _, raw = pair.partition("=")
        if name not in HYPERPARAMETER_DEFAULTS:
            raise LauncherError(f"unknown override field {name!r}")
        default = HYPERPARAMETER_DEFAULTS[name]
        if isinstance(default, int) and not isinstance(default, bool):
            overrides[name] = int(raw)
        elif isinstance(default, float):
            overrides[name] = float(raw)
        else:
            overrides[name] = raw
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="finetune-launcher",
        description="Emit trainer configs, validate datasets, launch LoRA runs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    emit = sub.add_parser("emit", help="write a trainer YAML config")
    emit.add_argument("--model", required=True, choices=sorted(MODEL_CHOICES))
    emit.add_argument("--dataset", required=True, type=Path)
    emit.add_argument("--out", required=True, type=Path)
    emit.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE")

    validate = sub.add_parser("validate", help="check a training JSONL file")
    validate.add_argument("--dataset", required=True, type=Path)

    run = sub.add_parser("launch", help="plan or start a training job")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--dry-run", action="store_true")
    run.add_argument("--trainer", default=None, help="trainer binary to invoke")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "emit":
            if not args.dataset.exists():
                print(f"dataset not found: {args.dataset}", file=sys.stderr)
                return EXIT_DATASET
            out = emit_config(args.model, args.dataset, args.out, _parse_overrides(args.set))
            print(f"wrote {out}")
            return EXIT_OK
        if args.command == "validate":
            report = validate_dataset(args.dataset)
            print(report.summary())
            return EXIT_OK if report.ok else EXIT_DATASET
        if args.command == "launch":
            if not args.config.exists():
                print(f"config not found: {args.config}", file=sys.stderr)
                return EXIT_DATASET
            result = launch(args.config, dry_run=args.dry_run, trainer_bin=args.trainer)
            if isinstance(result, DryRunPlan):
                print(result.summary())
                return EXIT_OK
            if result != 0:
                print(f"trainer exited with {result}", file=sys.stderr)
                return EXIT_TRAINER
            return EXIT_OK
        return EXIT_ARGS
    except LauncherError as exc:
        message = str(exc)
        print(message, file=sys.stderr)
        if "violations" in message or "dataset" in message:
            return EXIT_DATASET
        if "trainer binary" in message:
            return EXIT_TRAINER
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
