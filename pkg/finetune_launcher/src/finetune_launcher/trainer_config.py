"""Trainer configuration emission with pinned defaults.

The hyperparameter defaults are the published reference settings for both
supported model choices (identical for the two): LoRA rank 128, alpha 64,
dropout 0, AdamW, 50 warmup steps, learning rate 2e-5, 2 epochs, batch
size 20. They are frozen here and byte-compared against a checked-in
golden file by the test suite, so any drift fails loudly.

The emitted YAML has three top-level sections in fixed order:
  hyperparameters:  the resolved settings (defaults unless overridden)
  dataset:          path, sha256 digest, example count
  overrides:        provenance of every overridden field (default + value)

The file's hyperparameters section is byte-identical to the golden file
whenever no overrides are applied.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class LauncherError(RuntimeError):
    """Unknown model choice, bad override, or unusable dataset/trainer."""


MODEL_CHOICES: dict[str, str] = {
    "llava-1.5-7b": "liuhaotian/llava-v1.5-7b",
    "qwen2-vl-2b": "Qwen/Qwen2-VL-2B-Instruct",
}

HYPERPARAMETER_DEFAULTS: dict[str, object] = {
    "batch_size": 20,
    "epochs": 2,
    "learning_rate": 2e-5,
    "lora_alpha": 64,
    "lora_dropout": 0,
    "lora_rank": 128,
    "optimizer": "AdamW",
    "warmup_steps": 50,
}


@dataclass
class TrainerConfig:
    base_model_id: str
    dataset_path: Path
    lora_rank: int = 128
    lora_alpha: int = 64
    lora_dropout: float = 0
    optimizer: str = "AdamW"
    warmup_steps: int = 50
    learning_rate: float = 2e-5
    epochs: int = 2
    batch_size: int = 20
    overrides: dict[str, object] = field(default_factory=dict)

    def hyperparameters(self) -> dict[str, object]:
        return {
            "base_model_id": self.base_model_id,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "lora_alpha": self.lora_alpha,
            "lora_dropout": self.lora_dropout,
            "lora_rank": self.lora_rank,
            "optimizer": self.optimizer,
            "warmup_steps": self.warmup_steps,
        }


def build_config(
    model_choice: str,
    dataset_path: Path,
    overrides: dict[str, object] | None = None,
) -> TrainerConfig:
    if model_choice not in MODEL_CHOICES:
        raise LauncherError(
            f"unknown model choice {model_choice!r};"
            f" expected one of {sorted(MODEL_CHOICES)}"
        )
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(HYPERPARAMETER_DEFAULTS)
    if unknown:
        raise LauncherError(f"unknown override fields {sorted(unknown)}")
    config = TrainerConfig(
        base_model_id=MODEL_CHOICES[model_choice],
        dataset_path=Path(dataset_path),
        overrides=overrides,
    )
    for name, value in overrides.items():
        setattr(config, name, value)
    return config


def default_config_yaml(model_choice: str) -> str:
    """The no-override hyperparameters section; golden files hold this text."""
    config = build_config(model_choice, Path("unused"))
    return yaml.safe_dump(
        {"hyperparameters": config.hyperparameters()}, sort_keys=False
    )


def emit_config(
    model_choice: str,
    dataset_path: Path,
    out_path: Path,
    overrides: dict[str, object] | None = None,
) -> Path:
    """Write the trainer YAML; echoes the dataset digest and line count."""
    dataset_path = Path(dataset_path)
    if not dataset_path.exists():
        raise LauncherError(f"dataset not found: {dataset_path}")
    config = build_config(model_choice, dataset_path, overrides)

    data = dataset_path.read_bytes()
    examples = sum(1 for line in data.splitlines() if line.strip())
    document = {
        "hyperparameters": config.hyperparameters(),
        "dataset": {
            "path": str(dataset_path),
            "sha256": hashlib.sha256(data).hexdigest(),
            "examples": examples,
        },
        "overrides": {
            name: {"default": HYPERPARAMETER_DEFAULTS[name], "value": value}
            for name, value in sorted(config.overrides.items())
        },
    }
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(yaml.safe_dump(document, sort_keys=False), encoding="utf-8")
    return out_path


def load_config(path: Path) -> TrainerConfig:
    obj = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    try:
        hp = dict(obj["hyperparameters"])
        dataset = obj["dataset"]["path"]
    except (KeyError, TypeError) as exc:
        raise LauncherError(f"{path}: malformed trainer config: {exc}") from None
    base_model_id = hp.pop("base_model_id")
    overrides = {name: entry["value"] for name, entry in (obj.get("overrides") or {}).items()}
    return TrainerConfig(
        base_model_id=base_model_id,
        dataset_path=Path(dataset),
        overrides=overrides,
        **hp,
    )
