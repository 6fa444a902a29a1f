"""Hand-authored answer-extraction regression corpus.

Each case is (raw model response, answer type, expected normalized answer
or None). Expected values were worked out by hand against the documented
ladder and are frozen here; both the module tests and the acceptance
suite consume this table.
"""

from __future__ import annotations

import random

from cas_seat.corpus_io import AnswerType

O = AnswerType.OPTION_LETTER
I = AnswerType.INTEGER
F = AnswerType.FLOAT
T = AnswerType.FREE_TEXT

CASES: list[tuple[str, AnswerType, str | None]] = [
    # option letters, canonical phrase
    ("Step 1: compare bars.\nStep 2: tallest is B.\nThe answer is (B).", O, "B"),
    ("After some deliberation, the answer is (c).", O, "C"),
    ("The answer is (A). Wait, no. The answer is (D).", O, "D"),
    ("The answer is (B), final.", O, "B"),
    # option letters, clause and parenthesized fallbacks
    ("**Answer:** B", O, "B"),
    ("My final answer: (E)", O, "E"),
    ("the answer is b", O, "B"),
    ("Comparing (A) and (B); ultimately option (C) fits", O, "C"),
    ("Options weighed carefully. ANSWER IS (B)?", O, "B"),
    ("I really cannot tell from this image.", O, None),
    # signed integers
    ("Step 1: count the boxes.\nThe answer is 12.", I, "12"),
    ("The answer is -17.", I, "-17"),
    ("The answer is +250.", I, "250"),
    ("Total comes to 42 apples, so the answer is 42.", I, "42"),
    # comma / percent / markdown numerics
    ("Final answer: 1,234", I, "1234"),
    ("Answer: **7**", I, "7"),
    ("The answer is 80%.", I, "80"),
    ("The answer is 45%.", F, "45"),
    ("The answer is 1,234.56.", F, "1234.56"),
    # floats and rounding to 3 decimals
    ("The answer is 0.3333333.", F, "0.333"),
    ("The answer is .5.", F, "0.5"),
    ("The answer is -2.5.", F, "-2.5"),
    ("The answer is 2.0.", F, "2"),
    ("Answer: 3.14159", F, "3.142"),
    # bare-number ladder fallback
    ("There are 3, then 4, finally 12", I, "12"),
    ("The count is seven (7) boxes total", I, "7"),
    ("Probability roughly 0.66667 by my estimate", F, "0.667"),
    # numeric unparseable
    ("No digits appear here.", I, None),
    ("Nothing numeric to report.", F, None),
    # free text
    ("The answer is blue whale.", T, "blue whale"),
    ("Final answer: red panda", T, "red panda"),
    ("The answer is Paris", T, "Paris"),
    ("I think the answer is the Eiffel Tower.", T, "the Eiffel Tower"),
    ('Answer: "quartz"', T, "quartz"),
    ("The answer is A. M. Turing.", T, "A. M. Turing"),
    ("completely unrelated rambling", T, None),
]

_BABBLE = (
    "considering the figure again the relevant quantity appears near the axis "
    "label while the legend suggests otherwise and several candidate values "
    "were weighed before settling"
).split()


def wrap_canonical(answer: str, answer_type: AnswerType) -> str:
    if answer_type is O:
        return f"The answer is ({answer})."
    return f"The answer is {answer}."


def fuzzed_inputs(n: int, seed: int = 20240131):
    """Deterministic raw-response fuzzer for the idempotence property."""
    rng = random.Random(seed)
    types = [O, I, F, T]
    for _ in range(n):
        answer_type = rng.choice(types)
        if answer_type is O:
            payload = rng.choice("ABCDEabcde")
            phrase = rng.choice([f"The answer is ({payload}).", f"answer: {payload}"])
        elif answer_type is I:
            value = rng.randint(-99999, 99999)
            text = f"{value:+d}" if rng.random() < 0.3 else f"{value:,}"
            phrase = rng.choice([f"The answer is {text}.", f"Final answer: {text}"])
        elif answer_type is F:
            value = rng.uniform(-5000, 5000)
            text = f"{value:.5f}" + ("%" if rng.random() < 0.2 else "")
            phrase = rng.choice([f"The answer is {text}.", f"Answer: {text}"])
        else:
            words = rng.sample(_BABBLE, rng.randint(1, 3))
            phrase = f"The answer is {' '.join(words)}."
        prefix = " ".join(rng.sample(_BABBLE, rng.randint(0, 6)))
        suffix = " ".join(rng.sample(_BABBLE, rng.randint(0, 4)))
        raw = "\n".join(part for part in (prefix, phrase, suffix) if part)
        if rng.random() < 0.1:
            raw = prefix or "nothing to see"
        yield raw, answer_type
