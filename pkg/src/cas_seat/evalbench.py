"""Benchmark inference, answer extraction and normalization, and scoring.

Answer extraction walks a fixed ladder of regexes, most trusted first:

  1. the canonical terminal phrase for the answer type ("The answer is (B).");
  2. the last "answer is" / "answer:" clause anywhere in the text;
  3. option letters only: the last standalone "(X)" parenthesized letter;
  4. numeric types only: the last bare number token.

Normalization strips commas, percent signs, and surrounding brackets;
floats are compared after rounding to 3 decimals. Extraction is a total
function returning None when no rung matches; an unextractable prediction
is scored incorrect.

The We-Math block classifies each composite item against its one-step
substeps: CM (composite and all substeps right), RM (composite right,
some substep wrong), IG (composite wrong, all substeps right), IK
(composite wrong, some substep wrong). Strict counts CM alone; loose
folds RM into CM. The published average column satisfies
Avg = CM + 0.5*IG under both regimes; this identity reproduces the
reference report rows exactly and is what wemath_average implements.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .batch import Checkpoint, map_ordered
from .corpus_io import BENCHMARK_AXES, AnswerType, Benchmark, BenchmarkItem
from .gateway import ModelClient, text_part, user_message
from .prompts import TERMINAL_PATTERNS, TemplateId, render

_INT_TOKEN = r"[+-]?\d[\d,]*"
_FLOAT_TOKEN = r"[+-]?(?:\d[\d,]*(?:\.\d+)?|\.\d+)%?"

_CLAUSE_PATTERNS: dict[AnswerType, re.Pattern] = {
    AnswerType.OPTION_LETTER: re.compile(
        r"[Aa]nswer\s*(?:is|:)[\s*]*\(?([A-Za-z])\)?\b"
    ),
    AnswerType.INTEGER: re.compile(rf"[Aa]nswer\s*(?:is|:)[\s*]*\(?({_INT_TOKEN})"),
    AnswerType.FLOAT: re.compile(rf"[Aa]nswer\s*(?:is|:)[\s*]*\(?({_FLOAT_TOKEN})"),
    AnswerType.FREE_TEXT: re.compile(
        r"[Aa]nswer\s*(?:is|:)\s*(.+?)\s*\.?\s*$", re.MULTILINE
    ),
}

_PAREN_LETTER = re.compile(r"\(([A-Z])\)")
_NUMBER_TOKENS: dict[AnswerType, re.Pattern] = {
    AnswerType.INTEGER: re.compile(f"({_INT_TOKEN})"),
    AnswerType.FLOAT: re.compile(f"({_FLOAT_TOKEN})"),
}

EXTRACTOR_INSTRUCTION = (
    "Extract the final answer from the response below. Reply with exactly one"
    ' line of the form "The answer is X." and nothing else. If there is no'
    ' final answer, reply "NONE".\n\nResponse:\n'
)


class EvalError(RuntimeError):
    """Unknown axis, missing predictions, or malformed report inputs."""


class Phase(str, Enum):
    INFERENCE = "inference"
    SELF_EVALUATION = "self_evaluation"


def _strip_wrappers(token: str) -> str:
    token = token.strip()
    pairs = {"(": ")", "[": "]", "{": "}", '"': '"', "'": "'", "*": "*"}
    while len(token) >= 2 and token[0] in pairs and token[-1] == pairs[token[0]]:
        token = token[1:-1].strip()
    return token


def normalize_answer(token: str, answer_type: AnswerType) -> str | None:
    """Canonicalize an extracted payload; None when it cannot be parsed."""
    token = _strip_wrappers(token)
    if not token:
        return None
    if answer_type is AnswerType.OPTION_LETTER:
        return token.upper() if len(token) == 1 and token.isalpha() else None
    if answer_type is AnswerType.INTEGER:
        cleaned = token.replace(",", "").replace("%", "").rstrip(".")
        try:
            return str(int(cleaned))
        except ValueError:
            return None
    if answer_type is AnswerType.FLOAT:
        cleaned = token.replace(",", "").replace("%", "").rstrip(".")
        try:
            value = round(float(cleaned), 3)
        except (ValueError, OverflowError):
            return None
        # Plain decimal form, never scientific, so extraction is idempotent.
        text = f"{value:.3f}".rstrip("0").rstrip(".")
        return "0" if text in ("", "-0", "-") else text
    return " ".join(token.split()).rstrip(".") or None


def extract_answer(raw: str, answer_type: AnswerType) -> str | None:
    """Walk the extraction ladder; total function, None when nothing matches."""
    answer_type = AnswerType(answer_type)
    rungs: list[re.Pattern] = [TERMINAL_PATTERNS[answer_type], _CLAUSE_PATTERNS[answer_type]]
    if answer_type is AnswerType.OPTION_LETTER:
        rungs.append(_PAREN_LETTER)
    elif answer_type in _NUMBER_TOKENS:
        rungs.append(_NUMBER_TOKENS[answer_type])
    for pattern in rungs:
        matches = list(pattern.finditer(raw))
        if not matches:
            continue
        normalized = normalize_answer(matches[-1].group(1), answer_type)
        if normalized is not None:
            return normalized
    return None


def answers_match(
    extracted: str | None, gold: str, answer_type: AnswerType
) -> bool:
    """Compare a normalized extraction against the gold answer."""
    if extracted is None:
        return False
    answer_type = AnswerType(answer_type)
    gold_norm = normalize_answer(gold, answer_type)
    if answer_type is AnswerType.OPTION_LETTER:
        return gold_norm is not None and extracted.upper() == gold_norm
    if answer_type is AnswerType.INTEGER:
        try:
            return int(extracted) == int(gold.replace(",", "").replace("%", ""))
        except ValueError:
            return extracted == gold.strip()
    if answer_type is AnswerType.FLOAT:
        try:
            return round(float(extracted), 3) == round(
                float(gold.replace(",", "").replace("%", "")), 3
            )
        except ValueError:
            return extracted == gold.strip()
    return (gold_norm or "").casefold() == extracted.casefold()


def extract_with_model(
    raw: str, client: ModelClient, answer_type: AnswerType
) -> str | None:
    """Ask a stronger model to restate the answer, then re-run the ladder."""
    messages = [user_message(text_part(EXTRACTOR_INSTRUCTION + raw))]
    try:
        exchange = client.chat(messages)
    except Exception:
        return None
    return extract_answer(exchange.response_text, answer_type)


@dataclass
class Prediction:
    item_id: str
    phase: Phase
    raw_response: str
    extracted: str | None
    correct: bool

    def to_obj(self) -> dict:
        return {
            "id": self.item_id,
            "phase": self.phase.value,
            "raw_response": self.raw_response,
            "extracted": self.extracted,
            "correct": self.correct,
        }

    @staticmethod
    def from_obj(obj: dict) -> "Prediction":
        return Prediction(
            item_id=obj["id"],
            phase=Phase(obj["phase"]),
            raw_response=obj["raw_response"],
            extracted=obj.get("extracted"),
            correct=bool(obj["correct"]),
        )


def save_predictions(predictions: Sequence[Prediction], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for pred in predictions:
            fh.write(json.dumps(pred.to_obj(), sort_keys=True, ensure_ascii=False))
            fh.write("\n")


def load_predictions(path: Path) -> list[Prediction]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Prediction.from_obj(json.loads(line)))
    return out


def run_inference(
    items: Sequence[BenchmarkItem],
    client: ModelClient,
    template: TemplateId = TemplateId.P_COT,
    template_version: str = "v1",
    parallelism: int = 1,
    extractor_client: ModelClient | None = None,
    model_extraction: bool = False,
    checkpoint: Checkpoint | None = None,
) -> list[Prediction]:
    """One first-pass prediction per item.

    ``model_extraction`` gates the fallback extractor call; it is meant to
    be enabled for MathVista only, and only fires when the regex ladder
    comes up empty.
    """
    checkpoint = checkpoint or Checkpoint(None)

    def predict(item: BenchmarkItem) -> Prediction:
        done = checkpoint.get(item.base.id)
        if done is not None:
            return Prediction.from_obj(done)
        exchange = client.chat(render(template, item.base, version=template_version))
        raw = exchange.response_text
        extracted = extract_answer(raw, item.base.answer_type)
        if extracted is None and model_extraction and extractor_client is not None:
            extracted = extract_with_model(raw, extractor_client, item.base.answer_type)
        pred = Prediction(
            item_id=item.base.id,
            phase=Phase.INFERENCE,
            raw_response=raw,
            extracted=extracted,
            correct=answers_match(extracted, item.base.gold_answer, item.base.answer_type),
        )
        checkpoint.record(item.base.id, pred.to_obj())
        return pred

    return map_ordered(predict, items, parallelism)


def run_self_evaluation(
    items: Sequence[BenchmarkItem],
    client: ModelClient,
    first_pass: Sequence[Prediction],
    template: TemplateId = TemplateId.P_CSE,
    template_version: str = "v1",
    parallelism: int = 1,
    checkpoint: Checkpoint | None = None,
) -> list[Prediction]:
    """Second-turn evaluation of each item's own first-pass reasoning.

    The final answer is the corrected extraction, falling back to the
    first-pass answer when the evaluation yields nothing parseable.
    """
    from .cascade import CotTrace, parse_steps

    first_by_id = {p.item_id: p for p in first_pass}
    missing = [i.base.id for i in items if i.base.id not in first_by_id]
    if missing:
        raise EvalError(f"first pass missing predictions for {missing[:5]}")
    checkpoint = checkpoint or Checkpoint(None)

    def evaluate(item: BenchmarkItem) -> Prediction:
        done = checkpoint.get(item.base.id)
        if done is not None:
            return Prediction.from_obj(done)
        first = first_by_id[item.base.id]
        prior = CotTrace(
            sample_id=item.base.id,
            raw_response=first.raw_response,
            steps=parse_steps(first.raw_response),
            extracted_answer=first.extracted,
            teacher_model_id=client.config.model_id,
            template_version=template_version,
        )
        exchange = client.chat(
            render(template, item.base, prior=prior, version=template_version)
        )
        raw = exchange.response_text
        extracted = extract_answer(raw, item.base.answer_type)
        if extracted is None:
            extracted = first.extracted
        pred = Prediction(
            item_id=item.base.id,
            phase=Phase.SELF_EVALUATION,
            raw_response=raw,
            extracted=extracted,
            correct=answers_match(extracted, item.base.gold_answer, item.base.answer_type),
        )
        checkpoint.record(item.base.id, pred.to_obj())
        return pred

    return map_ordered(evaluate, items, parallelism)


# -- scoring ---------------------------------------------------------------


def wemath_average(cm: float, ig: float) -> float:
    return cm + 0.5 * ig


@dataclass
class WeMathMetrics:
    cm_strict: float
    cm_loose: float
    ig: float
    ik: float
    rm: float
    avg_strict: float
    avg_loose: float
    composite_count: int

    def as_dict(self) -> dict[str, float]:
        return {
            "Avg(Strict)": self.avg_strict,
            "IG(Strict)": self.ig,
            "CM(Strict)": self.cm_strict,
            "Avg(Loose)": self.avg_loose,
            "IG(Loose)": self.ig,
            "CM(Loose)": self.cm_loose,
            "RM": self.rm,
            "IK": self.ik,
        }


def composite_items(items: Sequence[BenchmarkItem]) -> list[BenchmarkItem]:
    """We-Math items that are not referenced as some other item's substep."""
    referenced: set[str] = set()
    for item in items:
        referenced.update(item.substep_ids or [])
    return [item for item in items if item.base.id not in referenced]


def score_wemath(
    items: Sequence[BenchmarkItem],
    predictions: Iterable[Prediction],
) -> WeMathMetrics:
    """Four-way classification over composites; see the module docstring."""
    by_id = {p.item_id: p for p in predictions}
    composites = composite_items(items)
    if not composites:
        raise EvalError("no We-Math composites to score")
    cm = rm = ig = ik = 0
    for item in composites:
        if item.base.id not in by_id:
            raise EvalError(f"missing prediction for composite {item.base.id!r}")
        comp_ok = by_id[item.base.id].correct
        for sid in item.substep_ids or []:
            if sid not in by_id:
                raise EvalError(f"missing prediction for substep {sid!r}")
        # Vacuously true for empty substep lists.
        subs_ok = all(by_id[sid].correct for sid in item.substep_ids or [])
        if comp_ok and subs_ok:
            cm += 1
        elif comp_ok:
            rm += 1
        elif subs_ok:
            ig += 1
        else:
            ik += 1
    n = len(composites)
    cm_strict = cm / n
    rm_frac = rm / n
    ig_frac = ig / n
    ik_frac = ik / n
    cm_loose = cm_strict + rm_frac
    return WeMathMetrics(
        cm_strict=cm_strict,
        cm_loose=cm_loose,
        ig=ig_frac,
        ik=ik_frac,
        rm=rm_frac,
        avg_strict=wemath_average(cm_strict, ig_frac),
        avg_loose=wemath_average(cm_loose, ig_frac),
        composite_count=n,
    )


def subset_breakdown(
    items: Sequence[BenchmarkItem],
    predictions: Iterable[Prediction],
    axis: str,
) -> dict[str, float]:
    """Per-label accuracy along one subset axis; zero-item labels are omitted."""
    if not items:
        return {}
    benchmark = items[0].benchmark
    if axis not in BENCHMARK_AXES[benchmark]:
        raise EvalError(f"unknown axis {axis!r} for {benchmark.value}")
    by_id = {p.item_id: p for p in predictions}
    totals: dict[str, int] = {}
    hits: dict[str, int] = {}
    for item in items:
        label = item.subset_labels[axis]
        totals[label] = totals.get(label, 0) + 1
        if item.base.id in by_id and by_id[item.base.id].correct:
            hits[label] = hits.get(label, 0) + 1
    return {
        label: hits.get(label, 0) / count for label, count in sorted(totals.items())
    }


@dataclass
class ScoreReport:
    benchmark: Benchmark
    phase: Phase
    overall_accuracy: float
    subset_accuracy: dict[str, dict[str, float]] = field(default_factory=dict)
    wemath: WeMathMetrics | None = None
    improve: dict[str, float] | None = None

    def columns(self) -> dict[str, float]:
        cols = {"Average": self.overall_accuracy}
        for axis in sorted(self.subset_accuracy):
            for label, acc in sorted(self.subset_accuracy[axis].items()):
                cols[f"{axis}:{label}"] = acc
        if self.wemath is not None:
            cols.update(self.wemath.as_dict())
        return cols

    def to_obj(self) -> dict:
        obj = {
            "benchmark": self.benchmark.value,
            "phase": self.phase.value,
            "overall_accuracy": self.overall_accuracy,
            "subset_accuracy": self.subset_accuracy,
        }
        if self.wemath is not None:
            obj["wemath"] = vars(self.wemath)
        if self.improve is not None:
            obj["improve"] = self.improve
        return obj

    @staticmethod
    def from_obj(obj: dict) -> "ScoreReport":
        wemath = None
        if obj.get("wemath") is not None:
            wemath = WeMathMetrics(**obj["wemath"])
        return ScoreReport(
            benchmark=Benchmark(obj["benchmark"]),
            phase=Phase(obj["phase"]),
            overall_accuracy=obj["overall_accuracy"],
            subset_accuracy=obj.get("subset_accuracy") or {},
            wemath=wemath,
            improve=obj.get("improve"),
        )


def build_report(
    items: Sequence[BenchmarkItem],
    predictions: Sequence[Prediction],
    axes: Sequence[str] | None = None,
) -> ScoreReport:
    """Score one prediction set: overall + per-axis subsets (+ We-Math block)."""
    if not items:
        raise EvalError("no items to score")
    benchmark = items[0].benchmark
    phase = predictions[0].phase if predictions else Phase.INFERENCE
    wemath = None
    scored_items = list(items)
    if benchmark is Benchmark.WEMATH:
        wemath = score_wemath(items, predictions)
        scored_items = composite_items(items)
    by_id = {p.item_id: p for p in predictions}
    hits = sum(
        1 for item in scored_items if by_id.get(item.base.id) and by_id[item.base.id].correct
    )
    report = ScoreReport(
        benchmark=benchmark,
        phase=phase,
        overall_accuracy=hits / len(scored_items),
        wemath=wemath,
    )
    for axis in axes if axes is not None else sorted(BENCHMARK_AXES[benchmark]):
        report.subset_accuracy[axis] = subset_breakdown(
            scored_items, predictions, axis
        )
    return report


# -- report emission ---------------------------------------------------------


def improvement(candidate: float, best_baseline: float) -> float:
    """Relative improvement over the best baseline value."""
    if best_baseline == 0:
        raise EvalError("best baseline is zero; relative improvement undefined")
    return (candidate - best_baseline) / best_baseline


def format_improve(value: float) -> str:
    return f"{value * 100:.2f}%"


def _format_cell(value: float | None) -> str:
    return "" if value is None else f"{value:.4f}"


def emit_report(
    candidates: Mapping[str, ScoreReport],
    baselines: Mapping[str, ScoreReport],
    out_dir: Path,
) -> dict[str, Path]:
    """Write markdown + CSV method-by-subset tables with an Improve row.

    Rows are baselines (in name order) then candidates; the Improve row for
    a candidate is its relative gain over the best baseline per column and
    is omitted when there are no baselines. Output is byte-stable for
    identical inputs.
    """
    if not candidates:
        raise EvalError("no candidate reports to emit")
    names = list(baselines) + list(candidates)
    if len(set(names)) != len(names):
        raise EvalError("baseline/candidate names must be distinct")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    all_reports = {**baselines, **candidates}
    groups: dict[tuple[str, str], list[str]] = {}
    for name, report in all_reports.items():
        groups.setdefault((report.benchmark.value, report.phase.value), []).append(name)

    md = io.StringIO()
    csv_buf = io.StringIO()
    writer = csv.writer(csv_buf, lineterminator="\n")
    improve_cells: dict[str, dict[str, float]] = {}

    for (benchmark, phase), names_in_group in sorted(groups.items()):
        group_baselines = [n for n in baselines if n in names_in_group]
        group_candidates = [n for n in candidates if n in names_in_group]
        columns: list[str] = []
        for name in names_in_group:
            for col in all_reports[name].columns():
                if col not in columns:
                    columns.append(col)

        md.write(f"## {benchmark} - {phase}\n\n")
        md.write("| Method | " + " | ".join(columns) + " |\n")
        md.write("|---" * (len(columns) + 1) + "|\n")
        writer.writerow(["benchmark", "phase", "method", *columns])

        def row_cells(name: str) -> list[float | None]:
            cols = all_reports[name].columns()
            return [cols.get(col) for col in columns]

        for name in group_baselines + group_candidates:
            cells = [_format_cell(v) for v in row_cells(name)]
            md.write(f"| {name} | " + " | ".join(cells) + " |\n")
            writer.writerow([benchmark, phase, name, *cells])

        if group_baselines:
            for candidate in group_candidates:
                cand_cols = all_reports[candidate].columns()
                label = (
                    "Improve"
                    if len(group_candidates) == 1
                    else f"Improve ({candidate})"
                )
                cells = []
                improve_map: dict[str, float] = {}
                for col in columns:
                    baseline_values = [
                        all_reports[b].columns().get(col) for b in group_baselines
                    ]
                    baseline_values = [v for v in baseline_values if v is not None]
                    cand_value = cand_cols.get(col)
                    if cand_value is None or not baseline_values or max(baseline_values) == 0:
                        cells.append("")  # relative gain undefined
                        continue
                    gain = improvement(cand_value, max(baseline_values))
                    improve_map[col] = gain
                    cells.append(format_improve(gain))
                md.write(f"| {label} | " + " | ".join(cells) + " |\n")
                writer.writerow([benchmark, phase, label, *cells])
                improve_cells[candidate] = improve_map
                all_reports[candidate].improve = improve_map
        md.write("\n")

    paths = {
        "md": out_dir / "report.md",
        "csv": out_dir / "report.csv",
        "json": out_dir / "report.json",
    }
    paths["md"].write_text(md.getvalue(), encoding="utf-8")
    paths["csv"].write_text(csv_buf.getvalue(), encoding="utf-8")
    machine = {
        name: report.to_obj() for name, report in sorted(all_reports.items())
    }
    paths["json"].write_text(
        json.dumps(machine, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    return paths
