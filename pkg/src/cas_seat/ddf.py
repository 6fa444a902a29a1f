"""Double-level data filtering with a complete keep/reject ledger.

Stage 1 (source) screens corpus records before any labeling, in this
order with short-circuit on the first reject:

  image_quality        local check: image readable and at least the
                       configured pixel floor; judge verdict BLURRY
  text_quality         judge verdicts MISMATCH (image/text disagree) and
                       VAGUE (ill-defined question)
  question_domain      excluded-domain metadata; judge verdict SPECIALIZED
  question_difficulty  n teacher attempts; reject when accuracy is within
                       the random-guess margin

Stage 2 (labeled) screens teacher responses, purely and in this order:

  label_text_quality   garbled / non-English text (see is_english_clean)
  label_length         whitespace-token cap
  label_format         canonical terminal answer phrase required

Every evaluation is recorded as a FilterDecision (verdict keep or
reject), so a stage's ledger partitions its input: every input id shows
up, rejected ids carry exactly one reject decision, and re-running a
reject decision's criterion in isolation reproduces it. An unparseable
judge response fails open (keep) with a warning decision rather than
silently shrinking the corpus.

All numeric thresholds are artifact defaults on FilterPolicy; the
criteria themselves are fixed.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

from PIL import Image

from .batch import Checkpoint, map_ordered
from .corpus_io import AnswerType, SampleRecord
from .evalbench import answers_match, extract_answer
from .gateway import ModelClient
from .prompts import (
    JUDGE_VERDICTS,
    TERMINAL_PHRASE_PATTERN,
    TERMINAL_PATTERNS,
    TemplateId,
    render,
)

if TYPE_CHECKING:
    from .cascade import CotTrace


class Stage(str, Enum):
    SOURCE = "source"
    LABELED = "labeled"


class Criterion(str, Enum):
    IMAGE_QUALITY = "image_quality"
    TEXT_QUALITY = "text_quality"
    QUESTION_DOMAIN = "question_domain"
    QUESTION_DIFFICULTY = "question_difficulty"
    LABEL_TEXT_QUALITY = "label_text_quality"
    LABEL_LENGTH = "label_length"
    LABEL_FORMAT = "label_format"


SOURCE_CRITERIA = (
    Criterion.IMAGE_QUALITY,
    Criterion.TEXT_QUALITY,
    Criterion.QUESTION_DOMAIN,
    Criterion.QUESTION_DIFFICULTY,
)
LABELED_CRITERIA = (
    Criterion.LABEL_TEXT_QUALITY,
    Criterion.LABEL_LENGTH,
    Criterion.LABEL_FORMAT,
)


@dataclass
class FilterPolicy:
    min_image_width: int = 64
    min_image_height: int = 64
    judge_template: TemplateId = TemplateId.P_FILTER_JUDGE
    excluded_domains: frozenset[str] = frozenset(
        {"medical_ct", "medical_mri", "pathology"}
    )
    difficulty_trials: int = 8
    random_margin: float = 0.05
    difficulty_sample_fraction: float = 1.0
    sample_seed: int = 0
    max_response_tokens: int = 2048
    non_latin_fraction_max: float = 0.20
    control_char_max: int = 0
    require_terminal_phrase: bool = True

    def __post_init__(self) -> None:
        if self.difficulty_trials < 1:
            raise ValueError("difficulty_trials must be >= 1")
        if not 0 <= self.random_margin < 1:
            raise ValueError("random_margin must be in [0, 1)")
        if self.max_response_tokens <= 0 or self.min_image_width <= 0:
            raise ValueError("caps must be positive")
        self.excluded_domains = frozenset(self.excluded_domains)


@dataclass
class FilterDecision:
    sample_id: str
    stage: Stage
    criterion: Criterion
    verdict: str  # "keep" | "reject"
    rationale: str

    def to_obj(self) -> dict:
        return {
            "id": self.sample_id,
            "stage": self.stage.value,
            "criterion": self.criterion.value,
            "verdict": self.verdict,
            "rationale": self.rationale,
        }

    @staticmethod
    def from_obj(obj: dict) -> "FilterDecision":
        return FilterDecision(
            sample_id=obj["id"],
            stage=Stage(obj["stage"]),
            criterion=Criterion(obj["criterion"]),
            verdict=obj["verdict"],
            rationale=obj["rationale"],
        )


def save_ledger(decisions: Sequence[FilterDecision], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for decision in decisions:
            fh.write(json.dumps(decision.to_obj(), sort_keys=True, ensure_ascii=False))
            fh.write("\n")


def load_ledger(path: Path) -> list[FilterDecision]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(FilterDecision.from_obj(json.loads(line)))
    return out


def rejection_histogram(ledger: Sequence[FilterDecision]) -> dict[str, int]:
    hist: dict[str, int] = {}
    for decision in ledger:
        if decision.verdict == "reject":
            hist[decision.criterion.value] = hist.get(decision.criterion.value, 0) + 1
    return dict(sorted(hist.items()))


# -- stage 2 predicates ------------------------------------------------------

_DEGENERATE_12GRAM = re.compile(r"(.{12})\1{3}", re.DOTALL)
_ALLOWED_CONTROL = {"\n", "\t", "\r"}


def is_english_clean(text: str, policy: FilterPolicy) -> tuple[bool, dict]:
    """Garbled-text check: non-Latin letter share, control chars, degeneration.

    Comparisons are strict: exactly the threshold fraction still passes.
    """
    letters = [ch for ch in text if ch.isalpha()]
    non_latin = sum(1 for ch in letters if not ("a" <= ch.lower() <= "z"))
    fraction = non_latin / len(letters) if letters else 0.0
    control = sum(
        1
        for ch in text
        if (ord(ch) < 32 and ch not in _ALLOWED_CONTROL) or ord(ch) == 127
    )
    degenerate = _DEGENERATE_12GRAM.search(text) is not None
    diagnostics = {
        "non_latin_fraction": fraction,
        "control_chars": control,
        "degenerate": degenerate,
    }
    clean = (
        fraction <= policy.non_latin_fraction_max
        and control <= policy.control_char_max
        and not degenerate
    )
    return clean, diagnostics


def conforms_format(text: str, answer_type: AnswerType | None = None) -> bool:
    """Does the response carry the canonical terminal answer phrase?"""
    if answer_type is None:
        return TERMINAL_PHRASE_PATTERN.search(text) is not None
    return TERMINAL_PATTERNS[AnswerType(answer_type)].search(text) is not None


def count_tokens(text: str) -> int:
    return len(text.split())


# -- stage 1 -----------------------------------------------------------------


def probe_image(record: SampleRecord, policy: FilterPolicy, image_root: Path | None) -> str | None:
    """Local image floor check; returns a reject rationale or None."""
    path = Path(record.image_ref)
    if not path.is_absolute() and image_root is not None:
        path = Path(image_root) / path
    try:
        with Image.open(path) as img:
            width, height = img.size
    except (OSError, ValueError) as exc:
        return f"image unreadable: {exc}"
    if width < policy.min_image_width or height < policy.min_image_height:
        return (
            f"image {width}x{height} below floor"
            f" {policy.min_image_width}x{policy.min_image_height}"
        )
    return None


def _parse_judge_verdict(text: str) -> str | None:
    words = text.split()
    if not words:
        return None
    token = words[0].strip(".,:;!").upper()
    return token if token in JUDGE_VERDICTS else None


def probe_temperature(trial: int) -> float:
    # Distinct per-trial temperatures give distinct cache keys, so repeated
    # attempts vary even under response caching.
    return round(trial * 0.1, 2)


def random_baseline(record: SampleRecord) -> float:
    if record.choices:
        return 1.0 / len(record.choices)
    return 0.0


def probe_difficulty(
    record: SampleRecord,
    client: ModelClient,
    policy: FilterPolicy,
    template_version: str = "v1",
) -> tuple[bool, float]:
    """n teacher attempts; keep iff accuracy clears random-guess + margin.

    An attempt whose answer cannot be extracted counts as incorrect.
    """
    messages = render(TemplateId.P_COT, record, version=template_version)
    correct = 0
    for trial in range(policy.difficulty_trials):
        exchange = client.chat(
            messages, params={"temperature": probe_temperature(trial)}
        )
        extracted = extract_answer(exchange.response_text, record.answer_type)
        if answers_match(extracted, record.gold_answer, record.answer_type):
            correct += 1
    accuracy = correct / policy.difficulty_trials
    keep = accuracy > random_baseline(record) + policy.random_margin
    return keep, accuracy


def _subsampled(record_id: str, policy: FilterPolicy) -> bool:
    if policy.difficulty_sample_fraction >= 1.0:
        return True
    digest = hashlib.sha256(
        f"{policy.sample_seed}:{record_id}".encode("utf-8")
    ).digest()
    draw = int.from_bytes(digest[:8], "big") / 2**64
    return draw < policy.difficulty_sample_fraction


def _evaluate_source_record(
    record: SampleRecord,
    client: ModelClient,
    policy: FilterPolicy,
    image_root: Path | None,
    template_version: str,
) -> list[FilterDecision]:
    def decision(criterion: Criterion, verdict: str, rationale: str) -> FilterDecision:
        return FilterDecision(record.id, Stage.SOURCE, criterion, verdict, rationale)

    decisions: list[FilterDecision] = []

    image_problem = probe_image(record, policy, image_root)
    if image_problem is not None:
        decisions.append(decision(Criterion.IMAGE_QUALITY, "reject", image_problem))
        return decisions

    judge_messages = render(
        policy.judge_template, record, version=template_version
    )
    verdict = _parse_judge_verdict(client.chat(judge_messages).response_text)
    if verdict is None:
        # Fail open: a flaky judge must not silently destroy the corpus.
        decisions.append(
            decision(
                Criterion.TEXT_QUALITY,
                "keep",
                "WARNING: judge response unparseable, keeping sample",
            )
        )
        verdict = "OK"
    if verdict == "BLURRY":
        decisions.append(
            decision(Criterion.IMAGE_QUALITY, "reject", "judge verdict BLURRY")
        )
        return decisions
    decisions.append(
        decision(Criterion.IMAGE_QUALITY, "keep", "image readable and above floor")
    )

    if verdict in ("MISMATCH", "VAGUE"):
        decisions.append(
            decision(Criterion.TEXT_QUALITY, "reject", f"judge verdict {verdict}")
        )
        return decisions
    decisions.append(decision(Criterion.TEXT_QUALITY, "keep", "judge verdict OK"))

    domain = record.meta.get("domain", "")
    if domain in policy.excluded_domains:
        decisions.append(
            decision(
                Criterion.QUESTION_DOMAIN, "reject", f"excluded domain {domain!r}"
            )
        )
        return decisions
    if verdict == "SPECIALIZED":
        decisions.append(
            decision(Criterion.QUESTION_DOMAIN, "reject", "judge verdict SPECIALIZED")
        )
        return decisions
    decisions.append(
        decision(Criterion.QUESTION_DOMAIN, "keep", "domain admissible")
    )

    if not _subsampled(record.id, policy):
        decisions.append(
            decision(
                Criterion.QUESTION_DIFFICULTY,
                "keep",
                "difficulty probe skipped (subsample)",
            )
        )
        return decisions
    keep, accuracy = probe_difficulty(record, client, policy, template_version)
    baseline = random_baseline(record)
    rationale = (
        f"probe accuracy {accuracy:.3f} vs random {baseline:.3f}"
        f" + margin {policy.random_margin:.3f}"
    )
    decisions.append(
        decision(
            Criterion.QUESTION_DIFFICULTY, "keep" if keep else "reject", rationale
        )
    )
    return decisions


def filter_source(
    records: Sequence[SampleRecord],
    client: ModelClient,
    policy: FilterPolicy,
    image_root: Path | None = None,
    template_version: str = "v1",
    parallelism: int = 1,
    checkpoint: Checkpoint | None = None,
) -> tuple[list[SampleRecord], list[FilterDecision]]:
    """Stage-1 filter; returns kept records and the complete decision ledger."""
    checkpoint = checkpoint or Checkpoint(None)

    def evaluate(record: SampleRecord) -> list[FilterDecision]:
        done = checkpoint.get(record.id)
        if done is not None:
            return [FilterDecision.from_obj(d) for d in done["decisions"]]
        decisions = _evaluate_source_record(
            record, client, policy, image_root, template_version
        )
        checkpoint.record(record.id, {"decisions": [d.to_obj() for d in decisions]})
        return decisions

    per_record = map_ordered(evaluate, records, parallelism)
    ledger: list[FilterDecision] = []
    kept: list[SampleRecord] = []
    for record, decisions in zip(records, per_record):
        ledger.extend(decisions)
        if all(d.verdict == "keep" for d in decisions):
            kept.append(record)
    return kept, ledger


# -- stage 2 -----------------------------------------------------------------


def filter_labeled(
    traces: Sequence["CotTrace"],
    policy: FilterPolicy,
) -> tuple[list["CotTrace"], list[FilterDecision]]:
    """Stage-2 filter over raw teacher responses; pure, no model calls."""
    kept: list["CotTrace"] = []
    ledger: list[FilterDecision] = []

    for trace in traces:
        def decision(criterion: Criterion, verdict: str, rationale: str) -> FilterDecision:
            return FilterDecision(trace.sample_id, Stage.LABELED, criterion, verdict, rationale)

        text = trace.raw_response
        clean, diag = is_english_clean(text, policy)
        if not clean:
            problems = []
            if diag["non_latin_fraction"] > policy.non_latin_fraction_max:
                problems.append(
                    f"non-Latin fraction {diag['non_latin_fraction']:.2f} >"
                    f" {policy.non_latin_fraction_max:.2f}"
                )
            if diag["control_chars"] > policy.control_char_max:
                problems.append(f"control characters {diag['control_chars']}")
            if diag["degenerate"]:
                problems.append("degenerate 12-gram repetition")
            ledger.append(
                decision(Criterion.LABEL_TEXT_QUALITY, "reject", "; ".join(problems))
            )
            continue
        ledger.append(decision(Criterion.LABEL_TEXT_QUALITY, "keep", "clean text"))

        tokens = count_tokens(text)
        if tokens > policy.max_response_tokens:
            ledger.append(
                decision(
                    Criterion.LABEL_LENGTH,
                    "reject",
                    f"{tokens} tokens over cap {policy.max_response_tokens}",
                )
            )
            continue
        ledger.append(decision(Criterion.LABEL_LENGTH, "keep", f"{tokens} tokens"))

        if policy.require_terminal_phrase and not conforms_format(text):
            ledger.append(
                decision(
                    Criterion.LABEL_FORMAT,
                    "reject",
                    "missing canonical terminal answer phrase",
                )
            )
            continue
        ledger.append(decision(Criterion.LABEL_FORMAT, "keep", "format conforms"))
        kept.append(trace)

    return kept, ledger
