"""Acceptance for the fine-tuning bridge, one printed line per criterion.

The cross-component check builds a shared fixture with the data-pipeline
package (expected to be installed alongside, e.g. `pip install -e ..`)
and asserts both sides report identical counts.
"""

from __future__ import annotations

import functools
from pathlib import Path

import yaml

from finetune_launcher.dataset import validate_dataset
from finetune_launcher.launch import launch, plan_steps
from finetune_launcher.trainer_config import (
    build_config,
    default_config_yaml,
    emit_config,
)

GOLDEN_DIR = Path(__file__).resolve().parents[1] / "src" / "finetune_launcher" / "golden"

EXPECTED_DEFAULTS = {
    "lora_rank": 128,
    "lora_alpha": 64,
    "lora_dropout": 0,
    "optimizer": "AdamW",
    "warmup_steps": 50,
    "learning_rate": 2e-5,
    "epochs": 2,
    "batch_size": 20,
}


def criterion_line(name: str):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"\n[ACCEPTANCE-SECONDARY] {name}: FAIL")
                raise
            print(f"\n[ACCEPTANCE-SECONDARY] {name}: PASS")
            return result

        return wrapper

    return decorate


@criterion_line("Golden config field-for-field + 16,700-step plan")
def test_golden_config_and_step_plan(tmp_path):
    for choice in ("llava-1.5-7b", "qwen2-vl-2b"):
        config = build_config(choice, Path("unused"))
        for name, expected in EXPECTED_DEFAULTS.items():
            assert getattr(config, name) == expected, (choice, name)
        golden = (GOLDEN_DIR / f"{choice}.yaml").read_text(encoding="utf-8")
        assert default_config_yaml(choice) == golden

    assert plan_steps(167_000, epochs=2, batch_size=20) == 16_700
    assert plan_steps(100, epochs=2, batch_size=20) == 10

    # a dry-run plan of a real (tiny) dataset reports the same arithmetic
    dataset = tmp_path / "train.jsonl"
    dataset.write_text(
        "".join(
            (
                '{"id": "q%d", "image": "i.png", "conversations": '
                '[{"from": "human", "value": "<image>\\nq"}, '
                '{"from": "gpt", "value": "The answer is (B)."}], '
                '"origin": "COT", "provenance": "q%d"}\n'
            )
            % (i, i)
            for i in range(100)
        ),
        encoding="utf-8",
    )
    config_path = emit_config("llava-1.5-7b", dataset, tmp_path / "c.yaml")
    plan = launch(config_path, dry_run=True)
    assert plan.planned_steps == 10


@criterion_line("validate_dataset agrees with the pipeline's dataset_stats")
def test_cross_component_histogram_agreement(tmp_path):
    cas_seat = __import__("cas_seat.corpus_io", fromlist=["corpus_io"])
    cascade_mod = __import__("cas_seat.cascade", fromlist=["cascade"])

    # build a mixed training set with the primary component and export it
    records = {}
    cot, cse = [], []
    for i in range(7):
        ident = f"c{i}"
        records[ident] = cas_seat.SampleRecord(
            id=ident,
            image_ref="img.png",
            question=f"Q {ident}?",
            gold_answer="B",
            answer_type=cas_seat.AnswerType.OPTION_LETTER,
            choices=["w", "x", "y", "z"],
        )
        cot.append(
            cascade_mod.CotTrace(
                sample_id=ident,
                raw_response="Step 1: fine.\nThe answer is (B).",
                steps=["Step 1: fine.\nThe answer is (B)."],
                extracted_answer="B",
                teacher_model_id="m",
                template_version="p_cot.v1",
            )
        )
    for i in range(3):
        ident = f"e{i}"
        records[ident] = cas_seat.SampleRecord(
            id=ident,
            image_ref="img.png",
            question=f"Q {ident}?",
            gold_answer="B",
            answer_type=cas_seat.AnswerType.OPTION_LETTER,
            choices=["w", "x", "y", "z"],
        )
        base = cascade_mod.CotTrace(
            sample_id=ident,
            raw_response="Step 1: slipped.\nThe answer is (A).",
            steps=["Step 1: slipped.\nThe answer is (A)."],
            extracted_answer="A",
            teacher_model_id="m",
            template_version="p_cot.v1",
        )
        cse.append(
            cascade_mod.EvalTrace(
                sample_id=ident,
                base=base,
                step_verdicts=[],
                corrected_answer="B",
                retained=True,
                raw_response="Each step verdict:\nStep 1: incorrect - x.\nThe answer is (B).",
                teacher_model_id="m",
                template_version="p_cse.v1",
            )
        )
    examples = cascade_mod.mix_training_set(cot, cse, records)
    path = tmp_path / "training.jsonl"
    cas_seat.export_training_jsonl(examples, path)

    primary_stats = cas_seat.dataset_stats(cas_seat.import_training_jsonl(path))
    report = validate_dataset(path)
    assert report.ok
    assert report.histogram == primary_stats == {"COT": 7, "CSE": 3, "total": 10}


@criterion_line("Emitted YAML parses and echoes dataset provenance")
def test_emitted_yaml_provenance(tmp_path):
    dataset = tmp_path / "t.jsonl"
    dataset.write_text(
        '{"id": "q0", "image": "i.png", "conversations": '
        '[{"from": "human", "value": "<image>\\nq"}, '
        '{"from": "gpt", "value": "The answer is (B)."}], '
        '"origin": "COT", "provenance": "q0"}\n',
        encoding="utf-8",
    )
    out = emit_config("qwen2-vl-2b", dataset, tmp_path / "c.yaml", {"epochs": 1})
    doc = yaml.safe_load(out.read_text(encoding="utf-8"))
    assert doc["hyperparameters"]["base_model_id"] == "Qwen/Qwen2-VL-2B-Instruct"
    assert doc["overrides"]["epochs"] == {"default": 2, "value": 1}
    assert doc["dataset"]["examples"] == 1
    assert len(doc["dataset"]["sha256"]) == 64
