"""Corpus and benchmark loading, training-data export, dataset statistics.

On-disk formats:
  - source corpus: one JSON array of record objects
      {"id": str, "image": str, "question": str, "choices": [str]?,
       "answer": str, "answer_type": "option_letter"|"integer"|"float"|"free_text",
       "source": str, "meta": {str: str}}
  - training data: JSONL, one conversation per line
      {"id": str, "image": str,
       "conversations": [{"from": "human"|"gpt", "value": str}],
       "origin": "COT"|"CSE"|"SEAT", "provenance": str}
  - benchmarks: one JSONL file per benchmark; each line is a source-corpus
    record plus {"benchmark": str, "subset_labels": {axis: label},
    "substeps": [id]?}. We-Math composites reference their one-step
    sub-items by id within the same file.

Image bytes are never embedded; ``image`` is a path relative to a
configured image root, resolved at request time.
"""

from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

IMAGE_PLACEHOLDER = "<image>"

_WIRE_ROLE = {"human": "human", "assistant": "gpt"}
_WIRE_ROLE_BACK = {v: k for k, v in _WIRE_ROLE.items()}


class CorpusError(ValueError):
    """Schema violation, duplicate id, or malformed file; message locates the offender."""


class AnswerType(str, Enum):
    OPTION_LETTER = "option_letter"
    INTEGER = "integer"
    FLOAT = "float"
    FREE_TEXT = "free_text"


class Benchmark(str, Enum):
    MMMU = "MMMU"
    MATHVISTA = "MathVista"
    MATHV = "MathV"
    WEMATH = "WeMath"


class Origin(str, Enum):
    COT = "COT"
    CSE = "CSE"
    SEAT = "SEAT"


class Role(str, Enum):
    HUMAN = "human"
    ASSISTANT = "assistant"


# Subset axes every item of a benchmark must carry. A value of None leaves
# the label vocabulary open; a frozenset closes it.
BENCHMARK_AXES: dict[Benchmark, dict[str, frozenset | None]] = {
    Benchmark.MMMU: {
        "task_type": frozenset({"BUS", "TE", "AD", "HM", "SCI", "HSS"}),
    },
    Benchmark.MATHVISTA: {
        "task_type": frozenset({"FQA", "MWP", "ALG", "ARI", "LOG", "NUM", "STA"}),
        "qtype": frozenset({"Multi-choice", "Free-form"}),
        "vqa_class": frozenset({"General VQA", "Math-targeted VQA"}),
    },
    Benchmark.MATHV: {
        "task_type": frozenset({"ALG", "ARI", "CG", "COM"}),
        "level": frozenset({"Level1", "Level2", "Level3", "Level4", "Level5"}),
    },
    Benchmark.WEMATH: {
        "task_type": frozenset({"UCU", "AL", "CPF", "UPF", "CSF", "USF", "BTF"}),
        "steps": frozenset({"One-step", "Two-step", "Three-step"}),
    },
}

# Substep count a We-Math composite must carry, by its steps label.
WEMATH_SUBSTEP_COUNT = {"One-step": 0, "Two-step": 2, "Three-step": 3}


@dataclass
class SampleRecord:
    """One corpus item: image reference, question, gold answer, metadata."""

    id: str
    image_ref: str
    question: str
    gold_answer: str
    answer_type: AnswerType
    choices: list[str] | None = None
    source_tag: str = ""
    meta: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.id:
            raise CorpusError("record id must be non-empty")
        if not self.image_ref:
            raise CorpusError(f"record {self.id!r}: image_ref must be non-empty")
        if not self.gold_answer:
            raise CorpusError(f"record {self.id!r}: gold_answer must be non-empty")
        if self.answer_type is AnswerType.OPTION_LETTER:
            if not self.choices:
                raise CorpusError(
                    f"record {self.id!r}: option_letter answers require choices"
                )
            letters = string.ascii_uppercase[: len(self.choices)]
            if self.gold_answer not in letters:
                raise CorpusError(
                    f"record {self.id!r}: gold_answer {self.gold_answer!r} not a valid"
                    f" option letter for {len(self.choices)} choices"
                )


@dataclass
class BenchmarkItem:
    """A benchmark sample plus its subset labels and (We-Math) substep links."""

    base: SampleRecord
    benchmark: Benchmark
    subset_labels: dict[str, str] = field(default_factory=dict)
    substep_ids: list[str] | None = None

    def validate(self) -> None:
        self.base.validate()
        if self.substep_ids is not None and self.benchmark is not Benchmark.WEMATH:
            raise CorpusError(
                f"item {self.base.id!r}: substep_ids only valid for We-Math"
            )
        for axis, labels in BENCHMARK_AXES[self.benchmark].items():
            if axis not in self.subset_labels:
                raise CorpusError(
                    f"item {self.base.id!r}: missing subset axis {axis!r}"
                    f" for {self.benchmark.value}"
                )
            label = self.subset_labels[axis]
            if labels is not None and label not in labels:
                raise CorpusError(
                    f"item {self.base.id!r}: unknown {axis!r} label {label!r}"
                )
        if self.benchmark is Benchmark.WEMATH:
            steps = self.subset_labels["steps"]
            want = WEMATH_SUBSTEP_COUNT[steps]
            got = len(self.substep_ids or [])
            if got != want:
                raise CorpusError(
                    f"item {self.base.id!r}: steps={steps!r} requires {want}"
                    f" substep ids, got {got}"
                )


@dataclass
class Turn:
    role: Role
    content: str


@dataclass
class TrainingExample:
    """One conversation-format training row with origin tag."""

    id: str
    image_ref: str
    turns: list[Turn]
    origin: Origin
    provenance_id: str

    def validate(self) -> None:
        if not self.turns:
            raise CorpusError(f"example {self.id!r}: empty conversation")
        for i, turn in enumerate(self.turns):
            want = Role.HUMAN if i % 2 == 0 else Role.ASSISTANT
            if turn.role is not want:
                raise CorpusError(
                    f"example {self.id!r}: turn {i} must be {want.value},"
                    f" got {turn.role.value}"
                )
        if self.turns[0].content.count(IMAGE_PLACEHOLDER) != 1:
            raise CorpusError(
                f"example {self.id!r}: first human turn must contain exactly one"
                f" {IMAGE_PLACEHOLDER} token"
            )
        if self.origin is Origin.CSE:
            assistant_turns = [t for t in self.turns if t.role is Role.ASSISTANT]
            has_eval_section = len(assistant_turns) == 1 and (
                "verdict" in assistant_turns[0].content.lower()
            )
            if len(assistant_turns) < 2 and not has_eval_section:
                raise CorpusError(
                    f"example {self.id!r}: CSE examples need >=2 assistant turns or"
                    " an evaluation section"
                )


def _record_from_obj(obj: dict, where: str) -> SampleRecord:
    for key in ("id", "image", "question", "answer", "answer_type"):
        if key not in obj:
            raise CorpusError(f"{where}: missing field {key!r}")
    try:
        answer_type = AnswerType(obj["answer_type"])
    except ValueError:
        raise CorpusError(
            f"{where}: unknown answer_type {obj['answer_type']!r}"
        ) from None
    record = SampleRecord(
        id=str(obj["id"]),
        image_ref=str(obj["image"]),
        question=str(obj["question"]),
        gold_answer=str(obj["answer"]),
        answer_type=answer_type,
        choices=list(obj["choices"]) if obj.get("choices") is not None else None,
        source_tag=str(obj.get("source", "")),
        meta={str(k): str(v) for k, v in (obj.get("meta") or {}).items()},
    )
    try:
        record.validate()
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from None
    return record


def record_to_obj(record: SampleRecord) -> dict:
    obj = {
        "id": record.id,
        "image": record.image_ref,
        "question": record.question,
        "answer": record.gold_answer,
        "answer_type": record.answer_type.value,
        "source": record.source_tag,
        "meta": record.meta,
    }
    if record.choices is not None:
        obj["choices"] = record.choices
    return obj


def load_source_corpus(path: Union[str, Path]) -> list[SampleRecord]:
    """Load a JSON-array corpus; duplicate ids and schema violations are hard errors."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, list):
        raise CorpusError(f"{path}: expected a JSON array of records")
    records = []
    seen: set[str] = set()
    for i, obj in enumerate(data):
        if not isinstance(obj, dict):
            raise CorpusError(f"{path}: record {i}: expected an object")
        record = _record_from_obj(obj, f"{path}: record {i}")
        if record.id in seen:
            raise CorpusError(f"{path}: record {i}: duplicate id {record.id!r}")
        seen.add(record.id)
        records.append(record)
    return records


def save_source_corpus(records: Sequence[SampleRecord], path: Union[str, Path]) -> int:
    """Write records back out as a JSON array (kept-corpus exports)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [record_to_obj(r) for r in records]
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    return len(records)


def load_benchmark(kind: Benchmark, path: Union[str, Path]) -> list[BenchmarkItem]:
    """Load one benchmark JSONL file, resolving We-Math substep references."""
    kind = Benchmark(kind)
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"benchmark file not found: {path}")
    items: list[BenchmarkItem] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}: line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{where}: invalid JSON: {exc}") from None
            base = _record_from_obj(obj, where)
            if base.id in seen:
                raise CorpusError(f"{where}: duplicate id {base.id!r}")
            seen.add(base.id)
            substeps = obj.get("substeps")
            item = BenchmarkItem(
                base=base,
                benchmark=kind,
                subset_labels={
                    str(k): str(v) for k, v in (obj.get("subset_labels") or {}).items()
                },
                substep_ids=None
                if substeps is None and kind is not Benchmark.WEMATH
                else [str(s) for s in (substeps or [])],
            )
            try:
                item.validate()
            except CorpusError as exc:
                raise CorpusError(f"{where}: {exc}") from None
            items.append(item)
    ids = {item.base.id for item in items}
    for item in items:
        for sid in item.substep_ids or []:
            if sid not in ids:
                raise CorpusError(
                    f"{path}: item {item.base.id!r}: dangling substep id {sid!r}"
                )
    return items


def example_to_obj(example: TrainingExample) -> dict:
    return {
        "id": example.id,
        "image": example.image_ref,
        "conversations": [
            {"from": _WIRE_ROLE[t.role.value], "value": t.content}
            for t in example.turns
        ],
        "origin": example.origin.value,
        "provenance": example.provenance_id,
    }


def example_from_obj(obj: dict, where: str) -> TrainingExample:
    for key in ("id", "image", "conversations", "origin", "provenance"):
        if key not in obj:
            raise CorpusError(f"{where}: missing field {key!r}")
    turns = []
    for i, turn in enumerate(obj["conversations"]):
        if "from" not in turn or "value" not in turn:
            raise CorpusError(f"{where}: conversation turn {i}: missing role field")
        if turn["from"] not in _WIRE_ROLE_BACK:
            raise CorpusError(
                f"{where}: conversation turn {i}: unknown role {turn['from']!r}"
            )
        turns.append(Turn(Role(_WIRE_ROLE_BACK[turn["from"]]), str(turn["value"])))
    try:
        origin = Origin(obj["origin"])
    except ValueError:
        raise CorpusError(f"{where}: unknown origin {obj['origin']!r}") from None
    example = TrainingExample(
        id=str(obj["id"]),
        image_ref=str(obj["image"]),
        turns=turns,
        origin=origin,
        provenance_id=str(obj["provenance"]),
    )
    try:
        example.validate()
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from None
    return example


def export_training_jsonl(
    examples: Sequence[TrainingExample], path: Union[str, Path]
) -> int:
    """Write one JSON line per example; byte-stable given identical input order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for example in examples:
        example.validate()
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for example in examples:
            fh.write(
                json.dumps(example_to_obj(example), sort_keys=True, ensure_ascii=False)
            )
            fh.write("\n")
    return len(examples)


def import_training_jsonl(path: Union[str, Path]) -> list[TrainingExample]:
    """Inverse of export_training_jsonl; malformed lines reported by number."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"training file not found: {path}")
    examples = []
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip("\r\n")
            if not line.strip():
                continue
            where = f"{path}: line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{where}: invalid JSON: {exc}") from None
            examples.append(example_from_obj(obj, where))
    return examples


def dataset_stats(
    items: Iterable[Union[TrainingExample, SampleRecord]],
) -> dict[str, int]:
    """Count items by origin (training examples) or source tag (records), plus total.

    The per-group counts always sum to ``total``.
    """
    counts: Counter[str] = Counter()
    total = 0
    for item in items:
        total += 1
        if isinstance(item, TrainingExample):
            counts[item.origin.value] += 1
        else:
            counts[item.source_tag or "unknown"] += 1
    stats = dict(sorted(counts.items()))
    stats["total"] = total
    return stats


def gold_lookup(records: Iterable[SampleRecord]) -> Mapping[str, SampleRecord]:
    """Index records by id for answer checking; duplicate ids are an error."""
    out: dict[str, SampleRecord] = {}
    for record in records:
        if record.id in out:
            raise CorpusError(f"duplicate id {record.id!r} in gold lookup")
        out[record.id] = record
    return out
