"""Dry-run planning and launching of the external LoRA trainer.

The trainer itself is pluggable: any binary accepting `--config <yaml>`.
This module only guarantees config fidelity, dataset validity, and an
accurate step plan; it never reimplements training.
"""

from __future__ import annotations

import os
import shutil
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

from .dataset import validate_dataset
from .trainer_config import LauncherError, TrainerConfig, load_config

TRAINER_ENV = "FINETUNE_TRAINER_BIN"
DEFAULT_TRAINER = "lora-trainer"


def plan_steps(examples: int, epochs: int, batch_size: int) -> int:
    """Optimizer steps for the run; a final partial batch counts as one step."""
    if batch_size <= 0:
        raise LauncherError("batch_size must be positive")
    return (examples * epochs + batch_size - 1) // batch_size


@dataclass
class DryRunPlan:
    command: list[str]
    examples: int
    planned_steps: int

    def summary(self) -> str:
        return (
            f"would run: {' '.join(self.command)}\n"
            f"examples: {self.examples}, planned steps: {self.planned_steps}"
        )


def launch(
    config_path: Path,
    dry_run: bool = True,
    trainer_bin: str | None = None,
    stream=sys.stdout,
):
    """Validate the dataset, then plan (dry run) or spawn the trainer.

    Returns a DryRunPlan in dry-run mode, the trainer's exit code otherwise.
    """
    config_path = Path(config_path)
    config: TrainerConfig = load_config(config_path)
    report = validate_dataset(config.dataset_path)
    if not report.ok:
        raise LauncherError(
            f"dataset {config.dataset_path} has {len(report.violations)}"
            f" violations; refusing to launch"
        )
    trainer = trainer_bin or os.environ.get(TRAINER_ENV, DEFAULT_TRAINER)
    command = [trainer, "--config", str(config_path)]
    steps = plan_steps(report.count, config.epochs, config.batch_size)
    if dry_run:
        return DryRunPlan(command=command, examples=report.count, planned_steps=steps)
    if shutil.which(trainer) is None:
        raise LauncherError(f"trainer binary not found: {trainer}")
    process = subprocess.Popen(
        command, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True
    )
    assert process.stdout is not None
    for line in process.stdout:
        stream.write(line)
    return process.wait()
