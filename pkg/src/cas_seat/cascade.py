"""Cascaded self-evaluation data engine.

The pipeline that builds the mixed training set from a filtered corpus:

  1. annotate_cot      teacher writes step-by-step solutions
  2. filter_labeled    (stage-2 filtering, applied between 1 and 3)
  3. partition_errors  split traces by extracted answer vs gold
  4. annotate_cse      teacher re-evaluates only the wrong traces with a
                       short evaluation-only prompt fed the faulty steps
  5. retain_corrected  keep evaluations whose corrected answer hits gold
  6. mix_training_set  correct CoT + retained corrections, origin-tagged

An extraction failure is routed into the error set, not discarded: an
answer that cannot be parsed cannot be verified correct, and the
evaluation pass is exactly the machinery for salvaging such traces.

Step grammar: a step starts at a line matching "Step k:" or "k." /
"k)". Anything before the first marker is preamble attached to step 1;
a marker-free response is one single step. Self-evaluation responses
carry an "Each step verdict:" section with one "Step k: correct" or
"Step k: incorrect - why" line per step; a response without that section
parses to empty verdicts and the corrected answer is taken from the
terminal phrase alone.

All fan-out is order-stable (results keyed by sample id, returned in
input order), so every operation yields identical artifacts at any
parallelism level.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .batch import Checkpoint, map_ordered
from .corpus_io import (
    Origin,
    Role,
    SampleRecord,
    TrainingExample,
    Turn,
)
from .ddf import FilterDecision, FilterPolicy, filter_labeled
from .evalbench import answers_match, extract_answer
from .gateway import ModelClient
from .prompts import (
    EVALUATION_MARKER,
    KEEP_PREFIX,
    VERDICT_PREFIX,
    TemplateId,
    cse_evaluation_turn_text,
    render,
    render_training_text,
)


class CascadeError(RuntimeError):
    """Unresolvable sample id or duplicate ids inside one origin."""


@dataclass
class CotTrace:
    sample_id: str
    raw_response: str
    steps: list[str]
    extracted_answer: str | None
    teacher_model_id: str
    template_version: str

    def to_obj(self) -> dict:
        return {
            "id": self.sample_id,
            "raw_response": self.raw_response,
            "steps": self.steps,
            "extracted_answer": self.extracted_answer,
            "teacher_model_id": self.teacher_model_id,
            "template_version": self.template_version,
        }

    @staticmethod
    def from_obj(obj: dict) -> "CotTrace":
        return CotTrace(
            sample_id=obj["id"],
            raw_response=obj["raw_response"],
            steps=list(obj["steps"]),
            extracted_answer=obj.get("extracted_answer"),
            teacher_model_id=obj["teacher_model_id"],
            template_version=obj["template_version"],
        )


@dataclass
class StepVerdict:
    step_index: int  # 1-based, within the base trace's steps
    verdict: str  # "correct" | "incorrect"
    critique: str = ""


@dataclass
class EvalTrace:
    sample_id: str
    base: CotTrace
    step_verdicts: list[StepVerdict]
    corrected_answer: str | None
    retained: bool = False
    self_keep: bool | None = None  # SEAT keep/discard self-selection
    raw_response: str = ""
    teacher_model_id: str = ""
    template_version: str = ""

    def to_obj(self) -> dict:
        return {
            "id": self.sample_id,
            "base": self.base.to_obj(),
            "step_verdicts": [
                [v.step_index, v.verdict, v.critique] for v in self.step_verdicts
            ],
            "corrected_answer": self.corrected_answer,
            "retained": self.retained,
            "self_keep": self.self_keep,
            "raw_response": self.raw_response,
            "teacher_model_id": self.teacher_model_id,
            "template_version": self.template_version,
        }

    @staticmethod
    def from_obj(obj: dict) -> "EvalTrace":
        return EvalTrace(
            sample_id=obj["id"],
            base=CotTrace.from_obj(obj["base"]),
            step_verdicts=[StepVerdict(k, v, c) for k, v, c in obj["step_verdicts"]],
            corrected_answer=obj.get("corrected_answer"),
            retained=bool(obj.get("retained", False)),
            self_keep=obj.get("self_keep"),
            raw_response=obj.get("raw_response", ""),
            teacher_model_id=obj.get("teacher_model_id", ""),
            template_version=obj.get("template_version", ""),
        )


def save_traces(traces: Sequence[CotTrace | EvalTrace], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for trace in traces:
            fh.write(json.dumps(trace.to_obj(), sort_keys=True, ensure_ascii=False))
            fh.write("\n")


def load_cot_traces(path: Path) -> list[CotTrace]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(CotTrace.from_obj(json.loads(line)))
    return out


def load_eval_traces(path: Path) -> list[EvalTrace]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(EvalTrace.from_obj(json.loads(line)))
    return out


# -- response grammars ---------------------------------------------------

_STEP_MARKER = re.compile(r"(?m)^(?:[Ss]tep\s+\d+\s*[:.]|\d+[.)]\s)")
_VERDICT_LINE = re.compile(
    r"(?mi)^Step\s+(\d+)\s*:\s*(correct|incorrect)\b[ \t]*[-—:]?[ \t]*(.*)$"
)
_KEEP_LINE = re.compile(rf"(?mi)^{re.escape(KEEP_PREFIX)}\s*(yes|no)\b")


def parse_steps(raw: str) -> list[str]:
    """Split a reasoning response into steps; see the module docstring."""
    matches = list(_STEP_MARKER.finditer(raw))
    if not matches:
        text = raw.strip()
        return [text] if text else []
    steps = []
    for i, match in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(raw)
        steps.append(raw[match.start() : end].strip())
    preamble = raw[: matches[0].start()].strip()
    if preamble:
        steps[0] = preamble + "\n" + steps[0]
    return steps


def parse_step_verdicts(raw: str, max_step: int) -> list[StepVerdict]:
    """Verdict lines after the "Each step verdict:" marker, clamped to the
    base trace's step range; no marker means no verdicts."""
    idx = raw.find(VERDICT_PREFIX)
    if idx < 0:
        return []
    verdicts = []
    for match in _VERDICT_LINE.finditer(raw[idx:]):
        step = int(match.group(1))
        if 1 <= step <= max_step:
            verdicts.append(
                StepVerdict(step, match.group(2).lower(), match.group(3).strip())
            )
    return verdicts


def parse_keep_flag(raw: str) -> bool:
    """SEAT keep/discard self-selection; absent means keep."""
    match = _KEEP_LINE.search(raw)
    return match is None or match.group(1).lower() == "yes"


# -- annotation ------------------------------------------------------------


def annotate_cot(
    records: Sequence[SampleRecord],
    client: ModelClient,
    template: TemplateId = TemplateId.P_COT,
    template_version: str = "v1",
    parallelism: int = 1,
    checkpoint: Checkpoint | None = None,
) -> list[CotTrace]:
    """One teacher reasoning trace per record; extraction failure is recorded
    as an absent answer, never fatal."""
    checkpoint = checkpoint or Checkpoint(None)

    def annotate(record: SampleRecord) -> CotTrace:
        done = checkpoint.get(record.id)
        if done is not None:
            return CotTrace.from_obj(done)
        exchange = client.chat(render(template, record, version=template_version))
        raw = exchange.response_text
        trace = CotTrace(
            sample_id=record.id,
            raw_response=raw,
            steps=parse_steps(raw),
            extracted_answer=extract_answer(raw, record.answer_type),
            teacher_model_id=client.config.model_id,
            template_version=f"{template.value}.{template_version}",
        )
        checkpoint.record(record.id, trace.to_obj())
        return trace

    return map_ordered(annotate, records, parallelism)


def partition_errors(
    traces: Sequence[CotTrace],
    gold: Mapping[str, SampleRecord],
) -> tuple[list[CotTrace], list[CotTrace]]:
    """Split traces into (correct_set, error_set) against gold answers."""
    correct_set: list[CotTrace] = []
    error_set: list[CotTrace] = []
    for trace in traces:
        record = gold.get(trace.sample_id)
        if record is None:
            raise CascadeError(f"no gold answer for sample {trace.sample_id!r}")
        if trace.extracted_answer is not None and answers_match(
            trace.extracted_answer, record.gold_answer, record.answer_type
        ):
            correct_set.append(trace)
        else:
            error_set.append(trace)
    return correct_set, error_set


def annotate_cse(
    error_traces: Sequence[CotTrace],
    records: Mapping[str, SampleRecord],
    client: ModelClient,
    template: TemplateId = TemplateId.P_CSE,
    template_version: str = "v1",
    parallelism: int = 1,
    checkpoint: Checkpoint | None = None,
) -> list[EvalTrace]:
    """Evaluation-only pass over the error set; the faulty reasoning rides
    along verbatim in the prompt."""
    checkpoint = checkpoint or Checkpoint(None)

    def evaluate(trace: CotTrace) -> EvalTrace:
        done = checkpoint.get(trace.sample_id)
        if done is not None:
            return EvalTrace.from_obj(done)
        record = records.get(trace.sample_id)
        if record is None:
            raise CascadeError(f"no record for sample {trace.sample_id!r}")
        exchange = client.chat(
            render(template, record, prior=trace, version=template_version)
        )
        raw = exchange.response_text
        result = EvalTrace(
            sample_id=trace.sample_id,
            base=trace,
            step_verdicts=parse_step_verdicts(raw, len(trace.steps)),
            corrected_answer=extract_answer(raw, record.answer_type),
            retained=False,
            raw_response=raw,
            teacher_model_id=client.config.model_id,
            template_version=f"{template.value}.{template_version}",
        )
        checkpoint.record(trace.sample_id, result.to_obj())
        return result

    return map_ordered(evaluate, error_traces, parallelism)


def retain_corrected(
    eval_traces: Sequence[EvalTrace],
    gold: Mapping[str, SampleRecord],
) -> list[EvalTrace]:
    """Exactly the evaluations whose corrected answer matches gold."""
    retained = []
    for trace in eval_traces:
        record = gold.get(trace.sample_id)
        if record is None:
            raise CascadeError(f"no gold answer for sample {trace.sample_id!r}")
        if trace.corrected_answer is not None and answers_match(
            trace.corrected_answer, record.gold_answer, record.answer_type
        ):
            retained.append(replace(trace, retained=True))
    return retained


def annotate_seat(
    records: Sequence[SampleRecord],
    client: ModelClient,
    template: TemplateId = TemplateId.P_SE,
    template_version: str = "v1",
    parallelism: int = 1,
    checkpoint: Checkpoint | None = None,
) -> list[EvalTrace]:
    """Single-prompt joint reasoning + evaluation (the long-prompt baseline)."""
    checkpoint = checkpoint or Checkpoint(None)

    def annotate(record: SampleRecord) -> EvalTrace:
        done = checkpoint.get(record.id)
        if done is not None:
            return EvalTrace.from_obj(done)
        exchange = client.chat(render(template, record, version=template_version))
        raw = exchange.response_text
        marker = raw.find(EVALUATION_MARKER)
        reasoning_part = raw[:marker] if marker >= 0 else raw
        base = CotTrace(
            sample_id=record.id,
            raw_response=reasoning_part.strip(),
            steps=parse_steps(reasoning_part),
            extracted_answer=extract_answer(reasoning_part, record.answer_type),
            teacher_model_id=client.config.model_id,
            template_version=f"{template.value}.{template_version}",
        )
        result = EvalTrace(
            sample_id=record.id,
            base=base,
            step_verdicts=parse_step_verdicts(raw, len(base.steps)),
            corrected_answer=extract_answer(raw, record.answer_type),
            retained=False,
            self_keep=parse_keep_flag(raw),
            raw_response=raw,
            teacher_model_id=client.config.model_id,
            template_version=f"{template.value}.{template_version}",
        )
        checkpoint.record(record.id, result.to_obj())
        return result

    return map_ordered(annotate, records, parallelism)


# -- training-set construction ----------------------------------------------


def _bare_version(template_version: str) -> str:
    return template_version.rsplit(".", 1)[-1] if template_version else "v1"


def _check_unique(ids: Sequence[str], origin: Origin) -> None:
    seen: set[str] = set()
    for sid in ids:
        if sid in seen:
            raise CascadeError(f"duplicate sample id {sid!r} in {origin.value} input")
        seen.add(sid)


def _require_record(records: Mapping[str, SampleRecord], sid: str) -> SampleRecord:
    record = records.get(sid)
    if record is None:
        raise CascadeError(f"no record for sample {sid!r}")
    return record


def mix_training_set(
    cot_correct: Sequence[CotTrace],
    cse_retained: Sequence[EvalTrace],
    records: Mapping[str, SampleRecord],
    cse_cap: int | None = None,
) -> list[TrainingExample]:
    """Mix correct CoT traces with retained corrections into training rows.

    CoT rows are single (prompt, reasoning) exchanges; CSE rows are two
    exchanges: the faulty reasoning as context, then the evaluation
    instruction and the correction as the target. ``cse_cap`` optionally
    downsamples the correction side (smallest sample ids kept, so the cap
    is deterministic); default off.
    """
    _check_unique([t.sample_id for t in cot_correct], Origin.COT)
    _check_unique([t.sample_id for t in cse_retained], Origin.CSE)
    if cse_cap is not None and len(cse_retained) > cse_cap:
        cse_retained = sorted(cse_retained, key=lambda t: t.sample_id)[:cse_cap]

    examples: list[TrainingExample] = []
    for trace in cot_correct:
        record = _require_record(records, trace.sample_id)
        prompt = render_training_text(
            TemplateId.P_COT, record, version=_bare_version(trace.template_version)
        )
        examples.append(
            TrainingExample(
                id=f"cot-{trace.sample_id}",
                image_ref=record.image_ref,
                turns=[
                    Turn(Role.HUMAN, prompt),
                    Turn(Role.ASSISTANT, trace.raw_response),
                ],
                origin=Origin.COT,
                provenance_id=trace.sample_id,
            )
        )
    for trace in cse_retained:
        record = _require_record(records, trace.sample_id)
        version = _bare_version(trace.base.template_version)
        prompt = render_training_text(TemplateId.P_COT, record, version=version)
        examples.append(
            TrainingExample(
                id=f"cse-{trace.sample_id}",
                image_ref=record.image_ref,
                turns=[
                    Turn(Role.HUMAN, prompt),
                    Turn(Role.ASSISTANT, trace.base.raw_response),
                    Turn(
                        Role.HUMAN,
                        cse_evaluation_turn_text(
                            _bare_version(trace.template_version)
                        ),
                    ),
                    Turn(Role.ASSISTANT, trace.raw_response),
                ],
                origin=Origin.CSE,
                provenance_id=trace.sample_id,
            )
        )
    for example in examples:
        example.validate()
    return examples


def seat_training_examples(
    seat_traces: Sequence[EvalTrace],
    records: Mapping[str, SampleRecord],
) -> list[TrainingExample]:
    """Training rows for the joint baseline: only self-kept traces survive."""
    _check_unique([t.sample_id for t in seat_traces], Origin.SEAT)
    examples = []
    for trace in seat_traces:
        if trace.self_keep is False:
            continue
        record = _require_record(records, trace.sample_id)
        prompt = render_training_text(
            TemplateId.P_SE, record, version=_bare_version(trace.template_version)
        )
        examples.append(
            TrainingExample(
                id=f"seat-{trace.sample_id}",
                image_ref=record.image_ref,
                turns=[
                    Turn(Role.HUMAN, prompt),
                    Turn(Role.ASSISTANT, trace.raw_response),
                ],
                origin=Origin.SEAT,
                provenance_id=trace.sample_id,
            )
        )
    for example in examples:
        example.validate()
    return examples


# -- whole-pipeline convenience ----------------------------------------------


@dataclass
class CascadeResult:
    cot_traces: list[CotTrace]
    labeled_kept: list[CotTrace]
    labeled_ledger: list[FilterDecision]
    correct_set: list[CotTrace]
    error_set: list[CotTrace]
    eval_traces: list[EvalTrace]
    retained: list[EvalTrace]
    examples: list[TrainingExample] = field(default_factory=list)


def run_cascade(
    records: Sequence[SampleRecord],
    client: ModelClient,
    policy: FilterPolicy,
    template_version: str = "v1",
    parallelism: int = 1,
    cot_checkpoint: Checkpoint | None = None,
    cse_checkpoint: Checkpoint | None = None,
    cse_cap: int | None = None,
) -> CascadeResult:
    """The full cascade over stage-1-kept records, through the mixed set."""
    gold = {r.id: r for r in records}
    cot_traces = annotate_cot(
        records,
        client,
        template_version=template_version,
        parallelism=parallelism,
        checkpoint=cot_checkpoint,
    )
    labeled_kept, labeled_ledger = filter_labeled(cot_traces, policy)
    correct_set, error_set = partition_errors(labeled_kept, gold)
    eval_traces = annotate_cse(
        error_set,
        gold,
        client,
        template_version=template_version,
        parallelism=parallelism,
        checkpoint=cse_checkpoint,
    )
    retained = retain_corrected(eval_traces, gold)
    examples = mix_training_set(correct_set, retained, gold, cse_cap=cse_cap)
    return CascadeResult(
        cot_traces=cot_traces,
        labeled_kept=labeled_kept,
        labeled_ledger=labeled_ledger,
        correct_set=correct_set,
        error_set=error_set,
        eval_traces=eval_traces,
        retained=retained,
        examples=examples,
    )
