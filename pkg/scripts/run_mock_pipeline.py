"""Build a synthetic corpus plus a scripted mock endpoint and run the whole
pipeline through the CLI: filter -> annotate (cascade) -> mix -> eval -> report.

No model endpoint is needed; every response is served from a fingerprint-keyed
mock script, so the run is fully deterministic and instant.

Usage:
    python scripts/run_mock_pipeline.py --workdir mock_run [--samples 24]
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from pathlib import Path

from PIL import Image

from cas_seat.cascade import CotTrace, parse_steps
from cas_seat.cli import main as cli_main
from cas_seat.corpus_io import AnswerType, SampleRecord, record_to_obj
from cas_seat.ddf import probe_temperature
from cas_seat.gateway import ClientConfig, fingerprint_request
from cas_seat.prompts import TemplateId, render

TEACHER = "mock-teacher-7b"
MAIN = "mock-main-2b"
TRIALS = 4


def make_record(ident: str, question: str, gold: str = "B") -> SampleRecord:
    return SampleRecord(
        id=ident,
        image_ref=f"{ident}.png",
        question=question,
        gold_answer=gold,
        answer_type=AnswerType.OPTION_LETTER,
        choices=["red bar", "blue bar", "green bar", "gray bar"],
        source_tag="synthetic",
    )


def correct(record: SampleRecord) -> str:
    return (
        "Step 1: read the axis labels.\nStep 2: compare the bar heights.\n"
        f"The answer is ({record.gold_answer})."
    )


def wrong(record: SampleRecord) -> str:
    bad = "A" if record.gold_answer != "A" else "C"
    return f"Step 1: eyeballed it quickly.\nStep 2: went with a hunch.\nThe answer is ({bad})."


def build(workdir: Path, n_samples: int, seed: int) -> Path:
    rng = random.Random(seed)
    images = workdir / "images"
    images.mkdir(parents=True, exist_ok=True)

    records = [
        make_record(f"s{i:03d}", f"Which bar is tallest in chart {i}?")
        for i in range(n_samples)
    ]
    for record in records:
        color = tuple(rng.randrange(40, 220) for _ in range(3))
        Image.new("RGB", (96, 96), color).save(images / record.image_ref)
    (workdir / "corpus.json").write_text(
        json.dumps([record_to_obj(r) for r in records], indent=2), encoding="utf-8"
    )

    bench_records = [
        make_record(f"b{i:02d}", f"Benchmark chart {i}: which bar is tallest?")
        for i in range(8)
    ]
    with (workdir / "mathvista.jsonl").open("w", encoding="utf-8") as fh:
        for i, record in enumerate(bench_records):
            color = tuple(rng.randrange(40, 220) for _ in range(3))
            Image.new("RGB", (96, 96), color).save(images / record.image_ref)
            fh.write(
                json.dumps(
                    {
                        **record_to_obj(record),
                        "subset_labels": {
                            "task_type": rng.choice(["FQA", "MWP", "ALG"]),
                            "qtype": "Multi-choice",
                            "vqa_class": rng.choice(
                                ["General VQA", "Math-targeted VQA"]
                            ),
                        },
                    }
                )
                + "\n"
            )

    teacher_cfg = ClientConfig(endpoint_url="", model_id=TEACHER)
    main_cfg = ClientConfig(endpoint_url="", model_id=MAIN)
    responses: dict[str, str] = {}

    def script(cfg, messages, text, params=None):
        responses[fingerprint_request(cfg, messages, params, images)] = text

    for record in records:
        fate = rng.random()
        script(teacher_cfg, render(TemplateId.P_FILTER_JUDGE, record), "OK")
        cot = correct(record) if fate < 0.6 else wrong(record)
        for trial in range(TRIALS):
            trial_text = cot if trial == 0 else correct(record)
            script(
                teacher_cfg,
                render(TemplateId.P_COT, record),
                trial_text,
                params={"temperature": probe_temperature(trial)},
            )
        if fate >= 0.6:
            prior = CotTrace(record.id, cot, parse_steps(cot), None, TEACHER, "v1")
            fixed = fate < 0.85  # most errors are corrected by the evaluation
            answer = record.gold_answer if fixed else "D"
            script(
                teacher_cfg,
                render(TemplateId.P_CSE, record, prior=prior),
                "Each step verdict:\nStep 1: correct\nStep 2: incorrect - hunch."
                f"\nThe answer is ({answer}).",
            )

    for record in bench_records:
        ok = rng.random() < 0.5
        first = correct(record) if ok else wrong(record)
        script(main_cfg, render(TemplateId.P_COT, record), first)
        prior = CotTrace(record.id, first, parse_steps(first), None, MAIN, "v1")
        fixed = ok or rng.random() < 0.7
        answer = record.gold_answer if fixed else "D"
        script(
            main_cfg,
            render(TemplateId.P_CSE, record, prior=prior),
            "Each step verdict:\nStep 1: correct\nStep 2: incorrect - hunch."
            f"\nThe answer is ({answer}).",
        )

    (workdir / "mock.json").write_text(
        json.dumps({"default": "UNSCRIPTED", "responses": responses}, indent=2),
        encoding="utf-8",
    )
    config = workdir / "run.toml"
    config.write_text(
        f"""
[paths]
source_corpus = "corpus.json"
image_root = "images"
out_dir = "out"

[benchmarks]
MathVista = "mathvista.jsonl"

[clients.teacher]
model_id = "{TEACHER}"

[clients.main]
model_id = "{MAIN}"

[filter]
difficulty_trials = {TRIALS}

[run]
parallelism = 4
template_version = "v1"
mock_script = "mock.json"
""",
        encoding="utf-8",
    )
    return config


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", type=Path, default=Path("mock_run"))
    parser.add_argument("--samples", type=int, default=24)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)

    config = build(args.workdir, args.samples, args.seed)
    base = ["--config", str(config)]
    steps = [
        ["filter"],
        ["annotate", "--mode", "cascade"],
        ["mix"],
        ["eval", "--benchmark", "MathVista"],
        ["eval", "--benchmark", "MathVista", "--phase", "self_evaluation"],
    ]
    for step in steps:
        print(f"\n=== cas-seat {' '.join(step)} ===")
        code = cli_main(base + step)
        if code != 0:
            print(f"step failed with exit code {code}", file=sys.stderr)
            return code
    out = args.workdir / "out"
    code = cli_main(
        base
        + [
            "report",
            "--baseline",
            f"inference={out / 'eval' / 'MathVista' / 'inference'}",
            "--candidate",
            f"selfeval={out / 'eval' / 'MathVista' / 'self_evaluation'}",
        ]
    )
    if code != 0:
        return code
    print(f"\nAll artifacts under {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
