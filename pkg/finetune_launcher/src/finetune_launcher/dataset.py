"""Validation of conversation-format training JSONL.

The expected line schema (produced by the data pipeline, consumed here
unchanged):

    {"id": str, "image": str,
     "conversations": [{"from": "human"|"gpt", "value": str}],
     "origin": "COT"|"CSE"|"SEAT", "provenance": str}

validate_dataset reports, it never throws: every problem becomes a
(line number, message) violation, valid lines feed the origin histogram.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

IMAGE_PLACEHOLDER = "<image>"
ORIGINS = ("COT", "CSE", "SEAT")
REQUIRED_FIELDS = ("id", "image", "conversations", "origin", "provenance")


@dataclass
class ValidationReport:
    count: int = 0
    histogram: dict[str, int] = field(default_factory=dict)
    violations: list[tuple[int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        lines = [f"valid examples: {self.count}"]
        for origin, n in sorted(self.histogram.items()):
            lines.append(f"  {origin}: {n}")
        lines.append(f"violations: {len(self.violations)}")
        for lineno, message in self.violations[:20]:
            lines.append(f"  line {lineno}: {message}")
        if len(self.violations) > 20:
            lines.append(f"  ... and {len(self.violations) - 20} more")
        return "\n".join(lines)


def _check_line(obj: dict) -> str | None:
    for key in REQUIRED_FIELDS:
        if key not in obj:
            return f"missing field {key!r}"
    if obj["origin"] not in ORIGINS:
        return f"unknown origin {obj['origin']!r}"
    turns = obj["conversations"]
    if not isinstance(turns, list) or not turns:
        return "conversations must be a non-empty list"
    for i, turn in enumerate(turns):
        if not isinstance(turn, dict) or "from" not in turn or "value" not in turn:
            return f"turn {i}: missing role field"
        want = "human" if i % 2 == 0 else "gpt"
        if turn["from"] != want:
            return f"turn {i}: expected role {want!r}, got {turn['from']!r}"
    if str(turns[0]["value"]).count(IMAGE_PLACEHOLDER) != 1:
        return f"first human turn must contain exactly one {IMAGE_PLACEHOLDER}"
    if obj["origin"] == "CSE":
        gpt_turns = [t for t in turns if t["from"] == "gpt"]
        single_with_eval = len(gpt_turns) == 1 and "verdict" in str(
            gpt_turns[0]["value"]
        ).lower()
        if len(gpt_turns) < 2 and not single_with_eval:
            return "CSE rows need >=2 gpt turns or an evaluation section"
    return None


def validate_dataset(path: Path) -> ValidationReport:
    """Count, per-origin histogram, and schema violations for one JSONL file."""
    report = ValidationReport()
    path = Path(path)
    if not path.exists():
        report.violations.append((0, f"file not found: {path}"))
        return report
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip("\r\n")
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                report.violations.append((lineno, f"invalid JSON: {exc}"))
                continue
            problem = _check_line(obj)
            if problem is not None:
                report.violations.append((lineno, problem))
                continue
            report.count += 1
            origin = obj["origin"]
            report.histogram[origin] = report.histogram.get(origin, 0) + 1
    report.histogram = dict(sorted(report.histogram.items()))
    report.histogram["total"] = report.count
    return report
