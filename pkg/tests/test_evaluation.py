from __future__ import annotations

import json
import random
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from fraud_desk.agents import Verdict
from fraud_desk.errors import (
    EmptyRatings,
    IncompleteEvaluation,
    InsufficientRows,
    LabelCoverageMismatch,
    LabelParseError,
    LengthMismatch,
    RatingParseError,
    UnknownStepIndex,
)
from fraud_desk.evaluation import (
    ASPECTS,
    DetectionMetrics,
    EvidenceRating,
    LikertLevel,
    aggregate_likert,
    categorize_steps,
    detection_metrics,
    efficiency_metrics,
    evaluate_report_quality,
    format_ratio,
    investigation_token_usage,
    label_supporting_steps,
    memorization_feature_completion,
    memorization_isfraud_check,
    min_trajectory_ratio,
    parse_likert,
    parse_ratings,
    stratified_sample,
)
from fraud_desk.gateway import ScriptedBackend, TranscriptEntry, Usage
from fraud_desk.orchestrator import Alert, Investigation, InvestigationStep

from .conftest import CapturingBackend
from .test_agents import small_report

RUBRIC_EXAMPLE_JSON = """\
  ```json
  {"report_evaluation" : [
    {
        "evidence": "The transaction amount is within the upper typical range for similar merchants."
        "impact_on_fraud_suspicion_level": "agree,"
        "relevant_to_investigation_case": "strongly agree,"
        "providing_new_knowledge": "disagree,"
        "logical_alignment": "agree"
    },
    {
        "evidence": "The distance between the cardholder's house and the transaction location is under 100 km."
        "impact_on_fraud_suspicion_level": "neither agree nor disagree,"
        "relevant_to_investigation_case": "agree,"
        "providing_new_knowledge": "agree,"
        "logical_alignment": "Agree"
    },
    {
        "evidence": "It falls within usual transaction hours, not an outlier."
        "impact_on_fraud_suspicion_level": "agree,"
        "relevant_to_investigation_case": "strongly agree,"
        "providing_new_knowledge": "Disagree,"
        "logical_alignment": "Strongly Disagree"
    },
]}

  ```
"""


def make_investigation(n_steps: int, fraudulent: bool = True) -> Investigation:
    investigation = Investigation(id="inv_s", alert=Alert(trans_num="t"))
    investigation.steps = [
        InvestigationStep(index=i, planning=f"plan {i}", gathering=[],
                          analysis=f"analysis {i}", is_terminal=(i == n_steps))
        for i in range(1, n_steps + 1)
    ]
    investigation.verdict = Verdict(fraudulent=fraudulent, rationale="r", raw="raw")
    investigation.status = "completed"
    investigation.stop_reason = "model_concluded"
    return investigation


class TestLikertParsing:
    def test_rubric_example_parses(self):
        ratings = parse_ratings(RUBRIC_EXAMPLE_JSON)
        assert len(ratings) == 3
        first = ratings[0]
        assert first.impact_on_fraud_suspicion_level == LikertLevel.AGREE
        assert first.relevant_to_investigation_case == LikertLevel.STRONGLY_AGREE
        assert first.providing_new_knowledge == LikertLevel.DISAGREE
        assert first.logical_alignment == LikertLevel.AGREE
        assert ratings[1].impact_on_fraud_suspicion_level == LikertLevel.NEITHER
        assert ratings[2].logical_alignment == LikertLevel.STRONGLY_DISAGREE

    def test_tokens_case_and_separator_insensitive(self):
        assert parse_likert("Strongly Agree") == LikertLevel.STRONGLY_AGREE
        assert parse_likert("strongly_agree") == LikertLevel.STRONGLY_AGREE
        assert parse_likert("agree,") == LikertLevel.AGREE
        assert parse_likert("Neither agree nor Disagree") == LikertLevel.NEITHER

    def test_unknown_token(self):
        with pytest.raises(RatingParseError):
            parse_likert("sorta agree")

    def test_missing_aspect(self):
        text = json.dumps({"report_evaluation": [{
            "evidence": "e",
            "impact_on_fraud_suspicion_level": "agree",
            "relevant_to_investigation_case": "agree",
            "providing_new_knowledge": "agree",
        }]})
        with pytest.raises(RatingParseError):
            parse_ratings(text)

    def test_count_mismatch_is_incomplete(self):
        report = small_report(["a", "b", "c", "d", "e"])
        four = json.dumps({"report_evaluation": [
            {"evidence": e, **{a: "agree" for a in ASPECTS}} for e in "abcd"
        ]})
        backend = CapturingBackend([four])
        with pytest.raises(IncompleteEvaluation):
            evaluate_report_quality(report, backend)

    def test_full_evaluation_pass(self):
        report = small_report(["a", "b"], ["c"])
        reply = json.dumps({"report_evaluation": [
            {"evidence": e, **{a: "strongly agree" for a in ASPECTS}} for e in "abc"
        ]})
        backend = CapturingBackend([reply])
        ratings = evaluate_report_quality(report, backend)
        assert len(ratings) == 3
        prompt = backend.requests[0].messages[0].content
        assert "Likert scale" in prompt
        assert "report_evaluation" in prompt  # few-shot example rides along


def rating(impact="agree", relevant="agree", new="agree", logic="agree",
           evidence="e") -> EvidenceRating:
    return EvidenceRating(
        evidence=evidence,
        impact_on_fraud_suspicion_level=parse_likert(impact),
        relevant_to_investigation_case=parse_likert(relevant),
        providing_new_knowledge=parse_likert(new),
        logical_alignment=parse_likert(logic),
    )


class TestAggregateLikert:
    def test_three_quarters(self):
        ratings = [rating(impact="agree"), rating(impact="strongly agree"),
                   rating(impact="disagree"), rating(impact="agree")]
        dist = aggregate_likert(ratings, "impact_on_fraud_suspicion_level")
        assert dist.top_two_fraction == 0.75
        assert dist.counts[LikertLevel.AGREE] == 2
        assert dist.counts[LikertLevel.DISAGREE] == 1

    def test_all_strongly_agree(self):
        ratings = [rating(logic="strongly agree")] * 3
        assert aggregate_likert(ratings, "logical_alignment").top_two_fraction == 1.0

    def test_empty(self):
        with pytest.raises(EmptyRatings):
            aggregate_likert([], "logical_alignment")

    @given(st.lists(st.sampled_from(list(LikertLevel)), min_size=1, max_size=50))
    def test_counts_conserve_and_match_brute_force(self, levels):
        ratings = [rating(new=level.name.replace("_", " ").lower()
                          if level != LikertLevel.NEITHER else "neither")
                   for level in levels]
        dist = aggregate_likert(ratings, "providing_new_knowledge")
        assert dist.total == len(levels)
        brute = sum(1 for lv in levels if lv >= LikertLevel.AGREE) / len(levels)
        assert dist.top_two_fraction == brute


class TestSupportingSteps:
    def judge(self, labels: dict) -> ScriptedBackend:
        return ScriptedBackend([TranscriptEntry(text=json.dumps({"labels": labels}))])

    def test_five_step_labeling(self):
        investigation = make_investigation(5)
        labels = label_supporting_steps(investigation, self.judge(
            {"1": "supporting", "2": "supporting", "3": "non-supporting",
             "4": "supporting", "5": "supporting"}
        ))
        sds = {i for i, v in labels.items() if v == "supporting"}
        assert sds == {1, 2, 4, 5}

    def test_unknown_step_index(self):
        investigation = make_investigation(5)
        with pytest.raises(UnknownStepIndex):
            label_supporting_steps(investigation, self.judge(
                {str(i): "supporting" for i in range(1, 6)} | {"9": "supporting"}
            ))

    def test_missing_step(self):
        investigation = make_investigation(5)
        with pytest.raises(LabelParseError):
            label_supporting_steps(investigation, self.judge(
                {str(i): "supporting" for i in range(1, 5)}
            ))

    def test_every_step_labeled_exactly_once(self):
        investigation = make_investigation(4)
        labels = label_supporting_steps(investigation, self.judge(
            {"1": "supporting", "2": "non-supporting", "3": "supporting",
             "4": "non-supporting"}
        ))
        assert sorted(labels) == [1, 2, 3, 4]


class TestTrajectory:
    def test_four_of_five(self):
        investigation = make_investigation(5)
        labels = {1: "supporting", 2: "supporting", 3: "non_supporting",
                  4: "supporting", 5: "supporting"}
        assert min_trajectory_ratio(investigation, labels) == Fraction(4, 5)
        assert format_ratio(Fraction(4, 5)) == "0.8000"

    def test_all_supporting(self):
        investigation = make_investigation(3)
        labels = {i: "supporting" for i in (1, 2, 3)}
        assert min_trajectory_ratio(investigation, labels) == 1

    def test_coverage_mismatch(self):
        investigation = make_investigation(5)
        labels = {i: "supporting" for i in (1, 2, 3, 4)}
        with pytest.raises(LabelCoverageMismatch):
            min_trajectory_ratio(investigation, labels)

    def test_hand_count_on_random_labelings(self):
        rng = random.Random(9)
        for _ in range(100):
            n = rng.randint(1, 12)
            investigation = make_investigation(n)
            labels = {i: rng.choice(["supporting", "non_supporting"])
                      for i in range(1, n + 1)}
            if not any(v == "supporting" for v in labels.values()):
                labels[1] = "supporting"  # keep the ratio in (0, 1]
            hand = sum(1 for v in labels.values() if v == "supporting")
            ratio = min_trajectory_ratio(investigation, labels)
            assert ratio == Fraction(hand, n)
            assert 0 < ratio <= 1

    def test_efficiency_metrics_bundle(self):
        investigation = make_investigation(5)
        investigation.usage = Usage(1000, 50)
        investigation.counter_name = "approx:chars/4"
        labels = {i: "supporting" for i in range(1, 6)}
        labels[2] = "non_supporting"
        metrics = efficiency_metrics(investigation, labels)
        assert metrics.step_count == 5
        assert metrics.min_trajectory_ratio == Fraction(4, 5)
        data = metrics.to_dict()
        assert data["min_trajectory_ratio"] == "0.8000"
        assert data["counter"] == "approx:chars/4"
        assert "image attachments excluded" in data["note"]


class TestDetectionMetrics:
    def test_memorization_table_values(self):
        metrics = DetectionMetrics(tp=6, fn=19, fp=2, tn=23)
        assert metrics.accuracy == 0.58
        assert metrics.precision == 0.75
        assert metrics.recall == 0.24
        assert metrics.f1 == pytest.approx(0.3636, abs=0.0001)

    def test_all_correct(self):
        metrics = detection_metrics([True, False, True], [True, False, True])
        assert metrics.precision == metrics.recall == metrics.f1 == metrics.accuracy == 1.0

    def test_zero_denominators_flagged(self):
        no_positive_predictions = DetectionMetrics(tp=0, fn=3, fp=0, tn=5)
        assert not no_positive_predictions.precision_defined
        assert no_positive_predictions.precision == 0.0
        no_actual_positives = DetectionMetrics(tp=0, fn=0, fp=2, tn=5)
        assert not no_actual_positives.recall_defined
        assert no_actual_positives.f1 == 0.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            detection_metrics([True], [True, False])

    def test_identities_on_random_matrices(self):
        rng = random.Random(1)
        for _ in range(1000):
            metrics = DetectionMetrics(
                tp=rng.randint(0, 40), tn=rng.randint(0, 40),
                fp=rng.randint(0, 40), fn=rng.randint(0, 40),
            )
            if metrics.total == 0:
                continue
            assert metrics.accuracy == (metrics.tp + metrics.tn) / metrics.total
            if metrics.precision_defined and metrics.recall_defined and (
                metrics.precision + metrics.recall
            ) > 0:
                p, r = metrics.precision, metrics.recall
                assert metrics.f1 == pytest.approx(2 * p * r / (p + r))

    def test_confusion_from_pairs(self):
        predicted = [True, True, False, False, True]
        actual = [True, False, True, False, True]
        metrics = detection_metrics(predicted, actual)
        assert (metrics.tp, metrics.fp, metrics.fn, metrics.tn) == (2, 1, 1, 1)

    def test_table_layout(self):
        table = DetectionMetrics(tp=6, fn=19, fp=2, tn=23).format_table()
        lines = table.splitlines()
        assert "Predicted Not Fraud" in lines[0]
        assert lines[1].split()[-3:] == ["23", "2", "25"]
        assert lines[2].split()[-3:] == ["19", "6", "25"]
        assert lines[3].split()[-3:] == ["42", "8", "50"]


class TestTokenUsage:
    def test_sums(self):
        investigation = make_investigation(1)
        investigation.usage = Usage(10, 5)
        assert investigation_token_usage(investigation) == (10, 5)
        investigation.usage = Usage(10, 5) + Usage(7, 3)
        assert investigation_token_usage(investigation) == (17, 8)

    def test_zero(self):
        investigation = make_investigation(1)
        assert investigation_token_usage(investigation) == (0, 0)


class TestCategorize:
    def test_histogram_mass_conserved(self):
        inv_a = make_investigation(4)
        inv_b = make_investigation(3)
        backend = ScriptedBackend([
            TranscriptEntry(text=json.dumps({"categories": {
                "1": "transaction detail extraction", "2": "geolocation analysis",
                "3": "geolocation analysis", "4": "timing patterns"}})),
            TranscriptEntry(text=json.dumps({"categories": {
                "1": "merchant behavior analysis", "2": "other",
                "3": "card testing sweep"}})),
        ])
        histogram = categorize_steps([inv_a, inv_b], backend)
        assert sum(histogram.values()) == 7
        assert histogram["geolocation analysis"] == 2
        assert histogram["card testing sweep"] == 1  # open taxonomy

    def test_empty_input(self):
        backend = ScriptedBackend([])
        assert categorize_steps([], backend) == {}

    def test_missing_step_rejected(self):
        investigation = make_investigation(2)
        backend = ScriptedBackend([TranscriptEntry(
            text=json.dumps({"categories": {"1": "other"}})
        )])
        with pytest.raises(LabelParseError):
            categorize_steps([investigation], backend)


def constant_backend(text: str, n: int) -> ScriptedBackend:
    return ScriptedBackend([TranscriptEntry(text=text)] * n)


class TestMemorization:
    def test_issues_exactly_150_tests(self, memcheck_dataset):
        backend = constant_backend("WRONG", 150)
        result = memorization_feature_completion(memcheck_dataset, backend, seed=3)
        assert result.test_count == 150
        assert backend.calls_made == 150

    def test_always_wrong_scores_zero(self, memcheck_dataset):
        backend = constant_backend("definitely not the value", 150)
        result = memorization_feature_completion(memcheck_dataset, backend, seed=3)
        assert result.accuracy == 0.0

    def test_excluded_features_never_hidden(self, memcheck_dataset):
        backend = constant_backend("WRONG", 150)
        result = memorization_feature_completion(memcheck_dataset, backend, seed=3)
        hidden = {test["column"] for test in result.tests}
        assert hidden.isdisjoint({"city", "state", "zip", "gender", "is_fraud"})

    def test_numeric_normalization_counts_match(self, memcheck_dataset):
        # answering the exact city_pop value as a float string must count
        legit, fraud = stratified_sample(memcheck_dataset, 25, seed=3)
        rng = random.Random(3)
        # replicate the hiding choices to build a perfect-answer transcript
        from fraud_desk.evaluation import EXCLUDED_FEATURES, _normalize_feature
        eligible = [c for c in memcheck_dataset.schema.by_name
                    if _normalize_feature(c) not in set(EXCLUDED_FEATURES)]
        replies = []
        for row in legit + fraud:
            for column in rng.sample(eligible, 3):
                value = row.get(column)
                if isinstance(value, (int, float)):
                    replies.append(TranscriptEntry(text=f"{float(value)}"))
                else:
                    replies.append(TranscriptEntry(text=str(value)))
        result = memorization_feature_completion(
            memcheck_dataset, ScriptedBackend(replies), seed=3
        )
        assert result.accuracy > 0.9  # datetimes render differently; the rest match

    def test_insufficient_rows(self, sparkov_dataset):
        backend = constant_backend("x", 10)
        with pytest.raises(InsufficientRows):
            memorization_feature_completion(sparkov_dataset, backend)

    def test_per_feature_tally_sums(self, memcheck_dataset):
        backend = constant_backend("WRONG", 150)
        result = memorization_feature_completion(memcheck_dataset, backend, seed=3)
        assert sum(total for _, total in result.per_feature.values()) == 150

    def test_isfraud_always_not_fraud_scores_half(self, memcheck_dataset):
        backend = constant_backend("Not Fraud", 50)
        result = memorization_isfraud_check(memcheck_dataset, backend, seed=3)
        assert result.matrix.accuracy == 0.5
        assert result.matrix.tn == 25
        assert result.matrix.fn == 25
        assert result.abstentions == 0

    def test_isfraud_matrix_totals(self, memcheck_dataset):
        backend = constant_backend("Fraud", 50)
        result = memorization_isfraud_check(memcheck_dataset, backend, seed=3)
        matrix = result.matrix
        assert matrix.tn + matrix.fp == 25
        assert matrix.fn + matrix.tp == 25
        assert matrix.total == 50

    def test_isfraud_reproduces_reference_pattern(self, memcheck_dataset):
        # legitimate rows first: 23 correct rejections then 2 false alarms;
        # fraud rows: 19 misses then 6 hits -> accuracy 0.58
        replies = (["Not Fraud"] * 23 + ["Fraud"] * 2
                   + ["Not Fraud"] * 19 + ["Fraud"] * 6)
        backend = ScriptedBackend([TranscriptEntry(text=t) for t in replies])
        result = memorization_isfraud_check(memcheck_dataset, backend, seed=3)
        matrix = result.matrix
        assert (matrix.tn, matrix.fp, matrix.fn, matrix.tp) == (23, 2, 19, 6)
        assert matrix.accuracy == 0.58

    def test_abstentions_reported_separately(self, memcheck_dataset):
        replies = ["Not Fraud"] * 48 + ["cannot say"] * 2
        backend = ScriptedBackend([TranscriptEntry(text=t) for t in replies])
        result = memorization_isfraud_check(memcheck_dataset, backend, seed=3)
        assert result.abstentions == 2
        assert result.matrix.total == 48

    def test_sampling_is_seed_stable(self, memcheck_dataset):
        first = stratified_sample(memcheck_dataset, 25, seed=5)
        second = stratified_sample(memcheck_dataset, 25, seed=5)
        key = memcheck_dataset.key_of
        assert [key(r) for r in first[0]] == [key(r) for r in second[0]]
        assert [key(r) for r in first[1]] == [key(r) for r in second[1]]
        third = stratified_sample(memcheck_dataset, 25, seed=6)
        assert [key(r) for r in first[0]] != [key(r) for r in third[0]]
