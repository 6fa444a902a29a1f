from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cas_seat.corpus_io import AnswerType, Benchmark, BenchmarkItem
from cas_seat.evalbench import (
    EvalError,
    Phase,
    Prediction,
    ScoreReport,
    answers_match,
    build_report,
    composite_items,
    emit_report,
    extract_answer,
    format_improve,
    improvement,
    normalize_answer,
    run_inference,
    run_self_evaluation,
    score_wemath,
    subset_breakdown,
    wemath_average,
)
from cas_seat.prompts import TemplateId, render

from conftest import ScriptBuilder, correct_answer_text, make_client, make_record
from extraction_cases import CASES, fuzzed_inputs, wrap_canonical


class TestExtractionCorpus:
    @pytest.mark.parametrize("raw,answer_type,expected", CASES)
    def test_case(self, raw, answer_type, expected):
        assert extract_answer(raw, answer_type) == expected

    def test_corpus_is_big_enough(self):
        assert len(CASES) >= 30

    @pytest.mark.parametrize("raw,answer_type,expected", CASES)
    def test_idempotence_on_corpus(self, raw, answer_type, expected):
        if expected is None:
            return
        assert extract_answer(wrap_canonical(expected, answer_type), answer_type) == expected

    def test_fuzzed_idempotence_sample(self):
        for raw, answer_type in fuzzed_inputs(200):
            first = extract_answer(raw, answer_type)
            if first is None:
                continue
            again = extract_answer(wrap_canonical(first, answer_type), answer_type)
            assert again == first, (raw, first, again)


class TestNormalization:
    def test_strips_commas_percent_brackets(self):
        assert normalize_answer("(1,234)", AnswerType.INTEGER) == "1234"
        assert normalize_answer("45%", AnswerType.FLOAT) == "45"
        assert normalize_answer("[B]", AnswerType.OPTION_LETTER) == "B"

    def test_float_rounding_three_decimals(self):
        assert normalize_answer("0.12345", AnswerType.FLOAT) == "0.123"
        assert answers_match("0.333", "0.3334", AnswerType.FLOAT)
        assert not answers_match("0.333", "0.34", AnswerType.FLOAT)

    def test_match_is_type_aware(self):
        assert answers_match("B", "b", AnswerType.OPTION_LETTER)
        assert answers_match("42", "42", AnswerType.INTEGER)
        assert answers_match("Blue Whale", "blue whale", AnswerType.FREE_TEXT)
        assert not answers_match(None, "B", AnswerType.OPTION_LETTER)


def mathv_item(ident: str, gold: str = "B", level: str = "Level1", task: str = "ALG") -> BenchmarkItem:
    return BenchmarkItem(
        base=make_record(ident, gold=gold),
        benchmark=Benchmark.MATHV,
        subset_labels={"task_type": task, "level": level},
    )


def pred(ident: str, correct: bool, phase: Phase = Phase.INFERENCE) -> Prediction:
    return Prediction(
        item_id=ident,
        phase=phase,
        raw_response="",
        extracted="B" if correct else "A",
        correct=correct,
    )


class TestRunInference:
    def test_all_gold_gives_accuracy_one(self, tmp_path, image_root):
        items = [mathv_item(f"m{i}") for i in range(4)]
        client, backend = make_client(tmp_path, image_root=image_root)
        builder = ScriptBuilder(client)
        for item in items:
            builder.on_render(TemplateId.P_COT, item.base, correct_answer_text(item.base))
        builder.install()
        preds = run_inference(items, client)
        assert all(p.correct for p in preds)
        assert build_report(items, preds).overall_accuracy == 1.0

    def test_nothing_parseable_gives_zero(self, tmp_path, image_root):
        items = [mathv_item(f"m{i}") for i in range(3)]
        client, _ = make_client(tmp_path, image_root=image_root)  # all UNSCRIPTED
        preds = run_inference(items, client)
        assert all(p.extracted is None and not p.correct for p in preds)

    def test_three_of_four(self, tmp_path, image_root):
        items = [mathv_item(f"m{i}") for i in range(4)]
        client, _ = make_client(tmp_path, image_root=image_root)
        builder = ScriptBuilder(client)
        for item in items[:3]:
            builder.on_render(TemplateId.P_COT, item.base, correct_answer_text(item.base))
        builder.on_render(TemplateId.P_COT, items[3].base, "The answer is (A).")
        builder.install()
        report = build_report(items, run_inference(items, client))
        assert report.overall_accuracy == 0.75


class TestSelfEvaluation:
    def test_correction_flips_to_gold(self, tmp_path, image_root):
        item = mathv_item("m1", gold="C")
        client, _ = make_client(tmp_path, image_root=image_root)
        builder = ScriptBuilder(client)
        first_raw = "Step 1: misread the chart.\nThe answer is (B)."
        builder.on_render(TemplateId.P_COT, item.base, first_raw)
        builder.install()
        first = run_inference([item], client)
        assert first[0].correct is False

        from cas_seat.cascade import CotTrace, parse_steps

        prior = CotTrace(
            sample_id=item.base.id,
            raw_response=first_raw,
            steps=parse_steps(first_raw),
            extracted_answer="B",
            teacher_model_id=client.config.model_id,
            template_version="v1",
        )
        builder.on(
            render(TemplateId.P_CSE, item.base, prior=prior),
            "Each step verdict:\nStep 1: incorrect - misread.\nThe answer is (C).",
        )
        builder.install()
        second = run_self_evaluation([item], client, first)
        assert second[0].phase is Phase.SELF_EVALUATION
        assert second[0].extracted == "C"
        assert second[0].correct is True

    def test_unparseable_evaluation_falls_back(self, tmp_path, image_root):
        item = mathv_item("m1", gold="B")
        client, _ = make_client(tmp_path, image_root=image_root)
        builder = ScriptBuilder(client)
        builder.on_render(TemplateId.P_COT, item.base, correct_answer_text(item.base))
        builder.install()
        first = run_inference([item], client)
        # evaluation response is UNSCRIPTED gibberish with no parseable answer
        second = run_self_evaluation([item], client, first)
        assert second[0].extracted == first[0].extracted
        assert second[0].correct is True

    def test_missing_first_pass_is_error(self, tmp_path, image_root):
        item = mathv_item("m1")
        client, _ = make_client(tmp_path, image_root=image_root)
        with pytest.raises(EvalError, match="first pass"):
            run_self_evaluation([item], client, [])


class TestModelAssistedExtraction:
    def test_fallback_extractor_used_when_ladder_fails(self, tmp_path, image_root):
        item = mathv_item("m1", gold="D")
        client, _ = make_client(tmp_path, image_root=image_root, model_id="main")
        extractor, ex_backend = make_client(tmp_path, model_id="extractor")
        verbose = "a long meandering description with no final verdict at all"
        builder = ScriptBuilder(client)
        builder.on_render(TemplateId.P_COT, item.base, verbose)
        builder.install()

        from cas_seat.evalbench import EXTRACTOR_INSTRUCTION
        from cas_seat.gateway import text_part, user_message

        key = extractor.fingerprint(
            [user_message(text_part(EXTRACTOR_INSTRUCTION + verbose))]
        )
        ex_backend.script[key] = "The answer is (D)."
        preds = run_inference(
            [item], client, extractor_client=extractor, model_extraction=True
        )
        assert preds[0].extracted == "D"
        assert preds[0].correct is True
        assert ex_backend.total_calls == 1

    def test_extractor_garbage_yields_absent(self, tmp_path, image_root):
        item = mathv_item("m1")
        client, _ = make_client(tmp_path, image_root=image_root)
        extractor, _ = make_client(tmp_path, model_id="extractor")  # UNSCRIPTED
        preds = run_inference(
            [item], client, extractor_client=extractor, model_extraction=True
        )
        assert preds[0].extracted is None

    def test_extractor_not_called_when_ladder_succeeds(self, tmp_path, image_root):
        item = mathv_item("m1")
        client, _ = make_client(tmp_path, image_root=image_root)
        extractor, ex_backend = make_client(tmp_path, model_id="extractor")
        builder = ScriptBuilder(client)
        builder.on_render(TemplateId.P_COT, item.base, correct_answer_text(item.base))
        builder.install()
        run_inference([item], client, extractor_client=extractor, model_extraction=True)
        assert ex_backend.total_calls == 0


def wemath_composite(ident: str, substeps: int) -> tuple[BenchmarkItem, list[BenchmarkItem]]:
    label = {0: "One-step", 1: "Two-step", 2: "Two-step", 3: "Three-step"}[substeps]
    sub_items = [
        BenchmarkItem(
            base=make_record(f"{ident}-s{k}"),
            benchmark=Benchmark.WEMATH,
            subset_labels={"task_type": "CPF", "steps": "One-step"},
            substep_ids=[],
        )
        for k in range(substeps)
    ]
    composite = BenchmarkItem(
        base=make_record(ident),
        benchmark=Benchmark.WEMATH,
        subset_labels={"task_type": "CPF", "steps": label},
        substep_ids=[s.base.id for s in sub_items],
    )
    return composite, sub_items


def classify_brute(comp_ok: bool, subs_ok: list[bool]) -> str:
    all_ok = all(subs_ok)
    if comp_ok and all_ok:
        return "CM"
    if comp_ok:
        return "RM"
    if all_ok:
        return "IG"
    return "IK"


class TestWeMath:
    def test_two_substep_exhaustive_patterns(self):
        # every one of the 2^3 correctness patterns lands in exactly one class
        composite, subs = wemath_composite("w", 2)
        items = [composite, *subs]
        for comp_ok, s1, s2 in itertools.product([False, True], repeat=3):
            preds = [
                pred(composite.base.id, comp_ok),
                pred(subs[0].base.id, s1),
                pred(subs[1].base.id, s2),
            ]
            metrics = score_wemath(items, preds)
            fractions = [metrics.cm_strict, metrics.rm, metrics.ig, metrics.ik]
            assert fractions.count(1.0) == 1 and fractions.count(0.0) == 3
            expected = classify_brute(comp_ok, [s1, s2])
            got = {
                "CM": metrics.cm_strict,
                "RM": metrics.rm,
                "IG": metrics.ig,
                "IK": metrics.ik,
            }[expected]
            assert got == 1.0
            assert metrics.cm_strict + metrics.rm + metrics.ig + metrics.ik == 1.0

    def test_one_step_vacuous_substeps(self):
        composite, _ = wemath_composite("w", 0)
        right = score_wemath([composite], [pred("w", True)])
        assert right.cm_strict == 1.0
        wrong = score_wemath([composite], [pred("w", False)])
        assert wrong.ig == 1.0  # all substeps vacuously correct

    def test_published_average_identity_fixed_points(self):
        # the strict row: CM 0.2381, IG 0.1448 -> Avg 0.3105
        assert round(wemath_average(0.2381, 0.1448), 4) == 0.3105
        # the loose row: CM 0.3276, IG 0.0438 -> Avg 0.3495
        assert round(wemath_average(0.3276, 0.0438), 4) == 0.3495

    def test_missing_substep_prediction_is_error(self):
        composite, subs = wemath_composite("w", 2)
        with pytest.raises(EvalError, match="substep"):
            score_wemath([composite, *subs], [pred("w", True), pred("w-s0", True)])

    def test_composite_detection(self):
        composite, subs = wemath_composite("w", 3)
        assert [c.base.id for c in composite_items([composite, *subs])] == ["w"]


@given(
    st.lists(
        st.tuples(st.booleans(), st.lists(st.booleans(), max_size=3)),
        min_size=1,
        max_size=25,
    )
)
@settings(max_examples=80)
def test_wemath_partition_and_identities(patterns):
    items = []
    preds = []
    for i, (comp_ok, subs_ok) in enumerate(patterns):
        composite, subs = wemath_composite(f"w{i}", len(subs_ok))
        items.extend([composite, *subs])
        preds.append(pred(composite.base.id, comp_ok))
        preds.extend(pred(s.base.id, ok) for s, ok in zip(subs, subs_ok))
    metrics = score_wemath(items, preds)
    assert metrics.cm_strict + metrics.rm + metrics.ig + metrics.ik == pytest.approx(1.0, abs=1e-12)
    # bit-exact: the stored averages are the same float expression recomputed
    assert metrics.avg_strict == metrics.cm_strict + 0.5 * metrics.ig
    assert metrics.avg_loose == metrics.cm_loose + 0.5 * metrics.ig
    assert metrics.cm_loose >= metrics.cm_strict
    for value in (metrics.cm_strict, metrics.cm_loose, metrics.ig, metrics.ik, metrics.rm):
        assert 0.0 <= value <= 1.0


class TestSubsetBreakdown:
    def test_level_split(self):
        items = [
            mathv_item("a", level="Level5"),
            mathv_item("b", level="Level5"),
            mathv_item("c", level="Level1"),
        ]
        preds = [pred("a", True), pred("b", True), pred("c", False)]
        assert subset_breakdown(items, preds, "level") == {
            "Level1": 0.0,
            "Level5": 1.0,
        }

    def test_single_item_label_is_zero_or_one(self):
        items = [mathv_item("a", level="Level3")]
        assert subset_breakdown(items, [pred("a", True)], "level") == {"Level3": 1.0}
        assert subset_breakdown(items, [pred("a", False)], "level") == {"Level3": 0.0}

    def test_unknown_axis(self):
        with pytest.raises(EvalError, match="unknown axis"):
            subset_breakdown([mathv_item("a")], [pred("a", True)], "bogus")

    def test_weighted_recombination_matches_overall(self):
        # frozen from an independently computed fixture: accuracy per label
        # weighted by label count must reproduce the overall accuracy
        import random

        rng = random.Random(7)
        items = [
            mathv_item(f"m{i}", level=f"Level{rng.randint(1, 5)}") for i in range(40)
        ]
        preds = [pred(item.base.id, rng.random() < 0.6) for item in items]
        by_axis = subset_breakdown(items, preds, "level")
        counts: dict[str, int] = {}
        for item in items:
            counts[item.subset_labels["level"]] = counts.get(item.subset_labels["level"], 0) + 1
        weighted = sum(by_axis[label] * count for label, count in counts.items())
        overall = sum(1 for p in preds if p.correct) / len(items)
        assert weighted / len(items) == pytest.approx(overall, abs=1e-12)


def report_with(avg: float, phase: Phase = Phase.SELF_EVALUATION) -> ScoreReport:
    return ScoreReport(
        benchmark=Benchmark.MATHVISTA, phase=phase, overall_accuracy=avg
    )


class TestEmitReport:
    def test_improve_cell_19_68(self, tmp_path):
        baselines = {
            "Base": report_with(0.3530),
            "Finetune": report_with(0.3490),
            "CoT": report_with(0.3760),
            "SEAT": report_with(0.3490),
        }
        candidates = {"Cascaded": report_with(0.4500)}
        paths = emit_report(candidates, baselines, tmp_path)
        md = paths["md"].read_text(encoding="utf-8")
        assert "19.68%" in md
        csv_text = paths["csv"].read_text(encoding="utf-8")
        assert "19.68%" in csv_text

    def test_improve_cell_55_57(self, tmp_path):
        baselines = {"Finetune": report_with(0.1776)}
        candidates = {"Cascaded": report_with(0.2763)}
        paths = emit_report(candidates, baselines, tmp_path)
        assert "55.57%" in paths["md"].read_text(encoding="utf-8")

    def test_equal_candidate_renders_zero(self, tmp_path):
        paths = emit_report(
            {"Cand": report_with(0.3)}, {"Base": report_with(0.3)}, tmp_path
        )
        assert "0.00%" in paths["md"].read_text(encoding="utf-8")

    def test_no_baselines_omits_improve(self, tmp_path):
        paths = emit_report({"Cand": report_with(0.3)}, {}, tmp_path)
        assert "Improve" not in paths["md"].read_text(encoding="utf-8")

    def test_byte_identical_reports(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        for out in (a_dir, b_dir):
            emit_report(
                {"Cand": report_with(0.4321)}, {"Base": report_with(0.37)}, out
            )
        assert (a_dir / "report.md").read_bytes() == (b_dir / "report.md").read_bytes()
        assert (a_dir / "report.csv").read_bytes() == (b_dir / "report.csv").read_bytes()

    def test_duplicate_names_rejected(self, tmp_path):
        with pytest.raises(EvalError, match="distinct"):
            emit_report(
                {"Base": report_with(0.4)}, {"Base": report_with(0.3)}, tmp_path
            )

    def test_improvement_arithmetic(self):
        assert format_improve(improvement(0.4500, 0.3760)) == "19.68%"
        assert format_improve(improvement(0.2763, 0.1776)) == "55.57%"
        assert format_improve(improvement(0.3, 0.3)) == "0.00%"
