"""Walk every composite/substep correctness pattern through the We-Math
classifier and print the resulting four-way split and average identities.

Usage:
    python scripts/wemath_classifier_demo.py [--substeps 2]
"""

from __future__ import annotations

import argparse
import itertools

from cas_seat.corpus_io import AnswerType, Benchmark, BenchmarkItem, SampleRecord
from cas_seat.evalbench import Phase, Prediction, score_wemath


def item(ident: str, steps_label: str, substep_ids: list[str]) -> BenchmarkItem:
    return BenchmarkItem(
        base=SampleRecord(
            id=ident,
            image_ref="none.png",
            question=ident,
            gold_answer="B",
            answer_type=AnswerType.OPTION_LETTER,
            choices=["a", "b", "c", "d"],
        ),
        benchmark=Benchmark.WEMATH,
        subset_labels={"task_type": "CPF", "steps": steps_label},
        substep_ids=substep_ids,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--substeps", type=int, default=2, choices=(0, 1, 2, 3))
    args = parser.parse_args(argv)

    k = args.substeps
    label = {0: "One-step", 1: "Two-step", 2: "Two-step", 3: "Three-step"}[k]
    subs = [item(f"w-s{j}", "One-step", []) for j in range(k)]
    composite = item("w", label, [s.base.id for s in subs])
    items = [composite, *subs]

    print(f"composite with {k} substeps: {2 * 2 ** k} correctness patterns\n")
    header = "pattern (comp, subs)      CM    RM    IG    IK   Avg(S) Avg(L)"
    print(header)
    print("-" * len(header))
    for pattern in itertools.product([True, False], repeat=k + 1):
        comp_ok, subs_ok = pattern[0], pattern[1:]
        preds = [
            Prediction("w", Phase.INFERENCE, "", "B" if comp_ok else "A", comp_ok)
        ] + [
            Prediction(s.base.id, Phase.INFERENCE, "", "B" if ok else "A", ok)
            for s, ok in zip(subs, subs_ok)
        ]
        m = score_wemath(items, preds)
        shown = (comp_ok, list(subs_ok))
        print(
            f"{str(shown):<24}{m.cm_strict:5.1f} {m.rm:5.1f} {m.ig:5.1f} "
            f"{m.ik:5.1f} {m.avg_strict:6.2f} {m.avg_loose:6.2f}"
        )
        assert m.avg_strict == m.cm_strict + 0.5 * m.ig
        assert m.avg_loose == m.cm_loose + 0.5 * m.ig
    print("\nboth averages always equal CM + 0.5 * IG for their regime")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
