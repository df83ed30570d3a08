"""Acceptance criteria, one test per criterion.

Each test prints one ``ACCEPTANCE <name>: PASS|FAIL`` line (run with -s or
check captured output). Tolerances are pinned here, not configurable.
"""

from __future__ import annotations

import functools
import json
import os
import random
import time

import pytest

from fraud_desk.agents import parse_report, render_report
from fraud_desk.datastore import SPARKOV_SCHEMA, ingest_and_preprocess
from fraud_desk.evaluation import (
    DetectionMetrics,
    LikertLevel,
    aggregate_likert,
    memorization_feature_completion,
    memorization_isfraud_check,
    min_trajectory_ratio,
    parse_ratings,
)
from fraud_desk.gateway import (
    HttpBackend,
    RecordingBackend,
    ScriptedBackend,
    TranscriptEntry,
    read_transcript,
)
from fraud_desk.orchestrator import Alert, run_investigation
from fraud_desk.tools import haversine_km

from . import scenarios
from .test_agents import random_report
from .test_evaluation import RUBRIC_EXAMPLE_JSON, make_investigation, rating
from .test_agents import GRAMMAR_EXAMPLE

from fractions import Fraction


def criterion(name):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"ACCEPTANCE {name}: FAIL")
                raise
            print(f"ACCEPTANCE {name}: PASS")
            return result
        return run
    return wrap


@criterion("replay-determinism")
def test_replay_determinism(sparkov_dataset, tmp_path):
    started = time.monotonic()
    golden_path = tmp_path / "golden.ndjson"
    recorder = RecordingBackend(ScriptedBackend(scenarios.golden_entries()), golden_path)
    run_investigation(Alert(trans_num=scenarios.TARGET_TRANS_NUM), recorder,
                      sparkov_dataset, out_dir=tmp_path / "seed")
    recorder.close()

    blobs = []
    for sub in ("run1", "run2"):
        backend = ScriptedBackend.from_path(golden_path, strict=True)
        investigation = run_investigation(
            Alert(trans_num=scenarios.TARGET_TRANS_NUM), backend, sparkov_dataset,
            out_dir=tmp_path / sub,
        )
        assert investigation.status == "completed"
        assert len(investigation.steps) == 5
        assert investigation.unfiltered_report is not None
        assert investigation.filtered_report is not None
        assert set(investigation.filtered_report.evidence) <= set(
            investigation.unfiltered_report.all_evidence
        )
        assert investigation.verdict is not None
        blobs.append(
            (tmp_path / sub / investigation.id / "investigation.json").read_bytes()
        )
    assert blobs[0] == blobs[1], "investigation JSON differs between replays"

    recorded_digests = [e.digest for e in read_transcript(golden_path)]
    persisted = json.loads(blobs[0].decode())
    assert persisted["prompt_digests"] == recorded_digests
    assert time.monotonic() - started < 5.0


@criterion("loop-bound")
def test_loop_bound(sparkov_dataset):
    started = time.monotonic()
    backend = ScriptedBackend(scenarios.never_concluding_entries(15))
    investigation = run_investigation(
        Alert(trans_num=scenarios.TARGET_TRANS_NUM), backend, sparkov_dataset,
        max_steps=15,
    )
    assert investigation.status == "budget_exhausted"
    assert len(investigation.steps) == 15
    assert backend.calls_made == 15
    assert time.monotonic() - started < 5.0


@criterion("metric-oracles")
def test_metric_oracles():
    reference = DetectionMetrics(tp=6, fn=19, fp=2, tn=23)
    assert reference.accuracy == 0.58
    assert reference.precision == 0.75
    assert reference.recall == 0.24
    assert abs(reference.f1 - 0.3636) <= 0.0001

    rng = random.Random(12)
    for _ in range(1000):
        m = DetectionMetrics(tp=rng.randint(0, 50), tn=rng.randint(0, 50),
                             fp=rng.randint(0, 50), fn=rng.randint(0, 50))
        if m.total:
            assert m.accuracy == (m.tp + m.tn) / m.total
        if m.precision_defined:
            assert m.precision == m.tp / (m.tp + m.fp)
        if m.recall_defined:
            assert m.recall == m.tp / (m.tp + m.fn)
        p, r = m.precision, m.recall
        if p + r > 0:
            assert abs(m.f1 - 2 * p * r / (p + r)) < 1e-12
        else:
            assert m.f1 == 0.0


@criterion("trajectory-formula")
def test_trajectory_formula():
    rng = random.Random(77)
    for _ in range(100):
        n = rng.randint(1, 15)
        investigation = make_investigation(n)
        labels = {i: rng.choice(["supporting", "non_supporting"])
                  for i in range(1, n + 1)}
        hand_count = sum(1 for v in labels.values() if v == "supporting")
        assert min_trajectory_ratio(investigation, labels) == Fraction(hand_count, n)

    fixture = make_investigation(5)
    labels = {1: "supporting", 2: "supporting", 3: "non_supporting",
              4: "supporting", 5: "supporting"}
    assert min_trajectory_ratio(fixture, labels) == Fraction(4, 5)
    assert float(min_trajectory_ratio(fixture, labels)) == 0.8


@criterion("report-grammar")
def test_report_grammar():
    report = parse_report(GRAMMAR_EXAMPLE)
    assert len(report.steps) == 2
    assert [len(s.evidence) for s in report.steps] == [1, 1]

    rng = random.Random(4242)
    for _ in range(1000):
        generated = random_report(rng)
        assert parse_report(render_report(generated)) == generated


@criterion("likert-pipeline")
def test_likert_pipeline():
    ratings = parse_ratings(RUBRIC_EXAMPLE_JSON)
    assert len(ratings) == 3
    first = ratings[0]
    assert first.impact_on_fraud_suspicion_level == LikertLevel.AGREE
    assert first.relevant_to_investigation_case == LikertLevel.STRONGLY_AGREE
    assert first.providing_new_knowledge == LikertLevel.DISAGREE
    assert first.logical_alignment == LikertLevel.AGREE

    rng = random.Random(8)
    tokens = {
        LikertLevel.STRONGLY_DISAGREE: "strongly disagree",
        LikertLevel.DISAGREE: "disagree",
        LikertLevel.NEITHER: "neither agree nor disagree",
        LikertLevel.AGREE: "agree",
        LikertLevel.STRONGLY_AGREE: "strongly agree",
    }
    for _ in range(200):
        levels = [rng.choice(list(LikertLevel)) for _ in range(rng.randint(1, 40))]
        ratings = [rating(impact=tokens[level]) for level in levels]
        dist = aggregate_likert(ratings, "impact_on_fraud_suspicion_level")
        brute = sum(1 for lv in levels if lv in (
            LikertLevel.AGREE, LikertLevel.STRONGLY_AGREE)) / len(levels)
        assert dist.top_two_fraction == brute
        assert sum(dist.counts.values()) == len(levels)


@criterion("preprocessing")
def test_preprocessing(sparkov_dataset, cctd_dataset):
    for row in sparkov_dataset.rows:
        assert "fraud" not in str(row["merchant"]).lower()
    values = {row["is_fraud"] for row in cctd_dataset.rows}
    assert values == {0, 1}
    assert all(isinstance(row["is_fraud"], int) for row in cctd_dataset.rows)


@criterion("geodistance")
def test_geodistance():
    assert haversine_km(12.3, 45.6, 12.3, 45.6) == 0.0
    rng = random.Random(2)
    for _ in range(100):
        a = (rng.uniform(-90, 90), rng.uniform(-180, 180))
        b = (rng.uniform(-90, 90), rng.uniform(-180, 180))
        forward = haversine_km(a[0], a[1], b[0], b[1])
        backward = haversine_km(b[0], b[1], a[0], a[1])
        assert abs(forward - backward) < 1e-9
    assert abs(haversine_km(0, 0, 0, 1) - 111.195) <= 0.001
    assert abs(haversine_km(0, 0, 0, 180) - 20015.09) <= 0.01


@criterion("memorization-harness")
def test_memorization_harness(memcheck_dataset):
    wrong = ScriptedBackend([TranscriptEntry(text="NOT-THE-VALUE")] * 150)
    completion = memorization_feature_completion(memcheck_dataset, wrong, seed=13)
    assert completion.test_count == 150
    assert wrong.calls_made == 150
    assert completion.accuracy == 0.0
    hidden = {test["column"] for test in completion.tests}
    assert hidden.isdisjoint({"city", "state", "zip", "gender", "is_fraud"})

    not_fraud = ScriptedBackend([TranscriptEntry(text="Not Fraud")] * 50)
    check = memorization_isfraud_check(memcheck_dataset, not_fraud, seed=13)
    assert check.matrix.accuracy == 0.5
    assert check.matrix.total == 50


_LIVE_VARS = ("FRAUD_DESK_LIVE_BASE_URL", "FRAUD_DESK_LIVE_MODEL", "FRAUD_DESK_API_KEY")


@pytest.mark.skipif(
    not all(os.environ.get(v) for v in _LIVE_VARS),
    reason="live smoke test needs " + ", ".join(_LIVE_VARS),
)
@criterion("live-smoke")
def test_live_smoke(sparkov_dataset, tmp_path):
    backend = HttpBackend(
        os.environ["FRAUD_DESK_LIVE_BASE_URL"],
        os.environ["FRAUD_DESK_LIVE_MODEL"],
    )
    investigation = run_investigation(
        Alert(trans_num=scenarios.TARGET_TRANS_NUM), backend, sparkov_dataset,
        max_steps=15, out_dir=tmp_path,
    )
    assert investigation.status == "completed"
    assert len(investigation.steps) <= 15
    assert investigation.unfiltered_report is not None
    assert investigation.verdict is not None
