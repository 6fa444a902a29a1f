"""Versioned prompt templates and deterministic rendering.

Templates live as text files under ``templates/`` named
``{template_id}.{version}.txt``. Bodies carry named slots {image},
{question}, {choices}, {prior_reasoning}; rendering is a pure function of
its inputs, so identical inputs produce byte-identical messages.

This module is also the single source of truth for the canonical terminal
answer phrase ("The answer is ...") and its per-answer-type extraction
patterns; both the label-format filter and the benchmark answer extractor
consume the descriptors returned by :func:`expected_answer_format`.

Five templates:
  p_plain         direct answer, no reasoning
  p_cot           step-by-step reasoning ending in the terminal phrase
  p_se            joint reasoning + self-evaluation + keep/discard
                  self-selection in one long prompt
  p_cse           evaluation-only: the prior reasoning is pasted in and
                  judged step by step (the cascaded short prompt)
  p_filter_judge  one-token data-quality verdict
                  {OK, BLURRY, MISMATCH, VAGUE, SPECIALIZED}
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import TYPE_CHECKING

from .corpus_io import IMAGE_PLACEHOLDER, AnswerType, SampleRecord
from .gateway import image_part, text_part, user_message

if TYPE_CHECKING:
    from .cascade import CotTrace

REASONING_MARKER = "## Reasoning"
EVALUATION_MARKER = "## Evaluation"
VERDICT_PREFIX = "Each step verdict:"
KEEP_PREFIX = "Keep for training:"
TERMINAL_PHRASE_PREFIX = "The answer is"

JUDGE_VERDICTS = ("OK", "BLURRY", "MISMATCH", "VAGUE", "SPECIALIZED")


class PromptError(ValueError):
    """Unfilled required slot, missing prior, or malformed template body."""


class TemplateId(str, Enum):
    P_PLAIN = "p_plain"
    P_COT = "p_cot"
    P_SE = "p_se"
    P_CSE = "p_cse"
    P_FILTER_JUDGE = "p_filter_judge"


_ALL_SLOTS = ("image", "question", "choices", "prior_reasoning")

REQUIRED_SLOTS: dict[TemplateId, frozenset[str]] = {
    TemplateId.P_PLAIN: frozenset({"image", "question"}),
    TemplateId.P_COT: frozenset({"image", "question"}),
    TemplateId.P_SE: frozenset({"image", "question"}),
    TemplateId.P_CSE: frozenset({"image", "question", "prior_reasoning"}),
    TemplateId.P_FILTER_JUDGE: frozenset({"image", "question"}),
}

DEFAULT_VERSION = "v1"


@dataclass(frozen=True)
class PromptTemplate:
    template_id: TemplateId
    version: str
    body: str
    required_slots: frozenset[str]

    def __post_init__(self) -> None:
        for slot in self.required_slots:
            count = self.body.count("{%s}" % slot)
            if count != 1:
                raise PromptError(
                    f"template {self.template_id.value}.{self.version}: slot"
                    f" {{{slot}}} must appear exactly once, found {count}"
                )


_TEMPLATE_CACHE: dict[tuple[TemplateId, str], PromptTemplate] = {}


def load_template(
    template_id: TemplateId, version: str = DEFAULT_VERSION
) -> PromptTemplate:
    template_id = TemplateId(template_id)
    key = (template_id, version)
    if key not in _TEMPLATE_CACHE:
        name = f"{template_id.value}.{version}.txt"
        try:
            body = (
                resources.files("cas_seat")
                .joinpath("templates", name)
                .read_text(encoding="utf-8")
            )
        except FileNotFoundError:
            raise PromptError(f"no such template: {name}") from None
        _TEMPLATE_CACHE[key] = PromptTemplate(
            template_id=template_id,
            version=version,
            body=body,
            required_slots=REQUIRED_SLOTS[template_id],
        )
    return _TEMPLATE_CACHE[key]


def render_choices(choices: list[str] | None) -> str:
    """Lettered "(A) ..." lines in the given order; empty when there are none."""
    if not choices:
        return ""
    lines = ["Choices:"]
    for letter, choice in zip(string.ascii_uppercase, choices):
        lines.append(f"({letter}) {choice}")
    lines.append("Give the final answer as the option letter in parentheses.")
    return "\n".join(lines) + "\n"


def _fill(template: PromptTemplate, slots: dict[str, str]) -> str:
    missing = template.required_slots - set(slots)
    if missing:
        raise PromptError(
            f"template {template.template_id.value}: unfilled required"
            f" slots {sorted(missing)}"
        )
    text = template.body
    for slot in _ALL_SLOTS:
        text = text.replace("{%s}" % slot, slots.get(slot, ""))
    return text


def render_text(
    template_id: TemplateId,
    sample: SampleRecord,
    prior: "CotTrace | None" = None,
    version: str = DEFAULT_VERSION,
    image_token: str = "",
) -> str:
    """Flat prompt text; ``image_token`` fills the {image} slot."""
    template = load_template(template_id, version)
    slots = {
        "image": image_token,
        "question": sample.question,
        "choices": render_choices(sample.choices),
    }
    if "prior_reasoning" in template.required_slots:
        if prior is None:
            raise PromptError(
                f"template {template.template_id.value} requires prior reasoning"
            )
        slots["prior_reasoning"] = prior.raw_response
    return _fill(template, slots)


def render(
    template_id: TemplateId,
    sample: SampleRecord,
    prior: "CotTrace | None" = None,
    version: str = DEFAULT_VERSION,
) -> list[dict]:
    """Render to a message list; the first message carries the image part."""
    text = render_text(template_id, sample, prior=prior, version=version)
    return [user_message(image_part(sample.image_ref), text_part(text))]


def render_training_text(
    template_id: TemplateId,
    sample: SampleRecord,
    prior: "CotTrace | None" = None,
    version: str = DEFAULT_VERSION,
) -> str:
    """Prompt text for training rows, with the literal image placeholder token."""
    return render_text(
        template_id,
        sample,
        prior=prior,
        version=version,
        image_token=IMAGE_PLACEHOLDER + "\n",
    )


def cse_evaluation_turn_text(version: str = DEFAULT_VERSION) -> str:
    """The evaluation instruction tail of p_cse, for use as a follow-up turn.

    In the two-turn training rendering the faulty reasoning is already in
    context as the previous assistant turn, so the instruction is issued
    without restating it.
    """
    body = load_template(TemplateId.P_CSE, version).body
    idx = body.index(EVALUATION_MARKER)
    return body[idx:].replace("the previous reasoning", "your reasoning above")


# -- canonical answer formats -------------------------------------------

_INT_PAYLOAD = r"[+-]?\d[\d,]*"
_FLOAT_PAYLOAD = r"[+-]?(?:\d[\d,]*(?:\.\d+)?|\.\d+)%?"

_PHRASE = r"[Tt]he answer is"

TERMINAL_PATTERNS: dict[AnswerType, re.Pattern] = {
    AnswerType.OPTION_LETTER: re.compile(rf"{_PHRASE}\s*\(([A-Za-z])\)\s*\.?"),
    AnswerType.INTEGER: re.compile(rf"{_PHRASE}\s*\(?({_INT_PAYLOAD})\)?\s*\.?"),
    AnswerType.FLOAT: re.compile(rf"{_PHRASE}\s*\(?({_FLOAT_PAYLOAD})\)?\s*\.?"),
    AnswerType.FREE_TEXT: re.compile(
        rf"{_PHRASE}[:\s]\s*(.+?)\s*\.?\s*$", re.MULTILINE
    ),
}

# Any-type presence check for the label-format filter.
TERMINAL_PHRASE_PATTERN = re.compile(rf"{_PHRASE}[:\s]\s*\S")


@dataclass(frozen=True)
class AnswerFormat:
    """Terminal-phrase descriptor shared by filtering and extraction."""

    template_id: TemplateId
    answer_type: AnswerType
    terminal_phrase: str
    pattern: re.Pattern
    verdict_prefix: str | None

    def build(self, answer: str) -> str:
        """A minimal synthetic response in exactly this format."""
        if self.answer_type is AnswerType.OPTION_LETTER:
            phrase = f"{TERMINAL_PHRASE_PREFIX} ({answer})."
        else:
            phrase = f"{TERMINAL_PHRASE_PREFIX} {answer}."
        if self.template_id is TemplateId.P_CSE:
            return f"{VERDICT_PREFIX}\nStep 1: correct\n{phrase}"
        if self.template_id is TemplateId.P_SE:
            return (
                f"{REASONING_MARKER}\nStep 1: solved directly.\n"
                f"{EVALUATION_MARKER}\n{VERDICT_PREFIX}\nStep 1: correct\n"
                f"{KEEP_PREFIX} yes\n{phrase}"
            )
        return f"Step 1: solved directly.\n{phrase}"


_PHRASE_DESCRIPTION = {
    AnswerType.OPTION_LETTER: 'The answer is (<L>). with L in A..Z',
    AnswerType.INTEGER: "The answer is <signed integer>.",
    AnswerType.FLOAT: "The answer is <number>.",
    AnswerType.FREE_TEXT: "The answer is <text>.",
}


def expected_answer_format(
    template_id: TemplateId, answer_type: AnswerType
) -> AnswerFormat:
    """Canonical terminal phrase and extraction pattern for a template/type pair."""
    template_id = TemplateId(template_id)
    answer_type = AnswerType(answer_type)
    phrase = _PHRASE_DESCRIPTION[answer_type]
    verdict = (
        VERDICT_PREFIX
        if template_id in (TemplateId.P_CSE, TemplateId.P_SE)
        else None
    )
    return AnswerFormat(
        template_id=template_id,
        answer_type=answer_type,
        terminal_phrase=phrase,
        pattern=TERMINAL_PATTERNS[answer_type],
        verdict_prefix=verdict,
    )
