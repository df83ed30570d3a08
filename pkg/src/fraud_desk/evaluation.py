"""Evaluation suite: evidence quality, efficiency, detection, memorization.

Judge-backed measures (Likert ratings, supporting-step labels, categories)
go through the backend contract, so scripted judges make every metric
deterministic in tests. Pure measures are exact: the trajectory ratio is a
rational number, detection metrics are integer arithmetic.
"""

from __future__ import annotations

import csv
import json
import random
import re
from dataclasses import dataclass
from enum import IntEnum
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import prompts
from .agents import UnfilteredReport
from .datastore import Dataset
from .errors import (
    EmptyRatings,
    IncompleteEvaluation,
    InsufficientRows,
    LabelCoverageMismatch,
    LabelParseError,
    LengthMismatch,
    RatingParseError,
    UnknownStepIndex,
    VerdictParseError,
)
from .gateway import IMAGE_TOKENS_NOTE, Backend, ChatMessage, CompletionRequest
from .orchestrator import Investigation


class LikertLevel(IntEnum):
    STRONGLY_DISAGREE = 1
    DISAGREE = 2
    NEITHER = 3
    AGREE = 4
    STRONGLY_AGREE = 5


_LIKERT_TOKENS = {
    "strongly disagree": LikertLevel.STRONGLY_DISAGREE,
    "disagree": LikertLevel.DISAGREE,
    "neither agree nor disagree": LikertLevel.NEITHER,
    "neither": LikertLevel.NEITHER,
    "neutral": LikertLevel.NEITHER,
    "agree": LikertLevel.AGREE,
    "strongly agree": LikertLevel.STRONGLY_AGREE,
}

ASPECTS = (
    "impact_on_fraud_suspicion_level",
    "relevant_to_investigation_case",
    "providing_new_knowledge",
    "logical_alignment",
)

SUPPORTING = "supporting"
NON_SUPPORTING = "non_supporting"

CATEGORY_SEEDS = (
    "transaction detail extraction",
    "geolocation analysis",
    "cardholder behavior analysis",
    "merchant behavior analysis",
    "recent activity",
    "timing patterns",
    "other",
)


def parse_likert(token: str) -> LikertLevel:
    normalized = re.sub(r"[\s_]+", " ", str(token)).strip().strip(".,;:!").lower()
    try:
        return _LIKERT_TOKENS[normalized]
    except KeyError:
        raise RatingParseError(f"unknown Likert token {token!r}") from None


@dataclass(frozen=True)
class EvidenceRating:
    evidence: str
    impact_on_fraud_suspicion_level: LikertLevel
    relevant_to_investigation_case: LikertLevel
    providing_new_knowledge: LikertLevel
    logical_alignment: LikertLevel

    def aspect(self, name: str) -> LikertLevel:
        if name not in ASPECTS:
            raise RatingParseError(f"unknown aspect {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class LikertDistribution:
    counts: Mapping[LikertLevel, int]
    top_two_fraction: float

    @property
    def total(self) -> int:
        return sum(self.counts.values())


# --- rating parse ------------------------------------------------------------------


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def _extract_json_block(text: str) -> str:
    fenced = _FENCE_RE.search(text)
    if fenced:
        return fenced.group(1)
    start, end = text.find("{"), text.rfind("}")
    if start == -1 or end <= start:
        raise RatingParseError("no JSON object found in judge output")
    return text[start:end + 1]


def _repair_json(block: str) -> str:
    # Judges routinely drop the comma between adjacent string fields and
    # leave trailing commas; both are mechanical to undo.
    repaired = re.sub(r'"\s*\n(\s*")', '",\n\\1', block)
    repaired = re.sub(r",(\s*[}\]])", r"\1", repaired)
    return repaired


def parse_json_leniently(text: str) -> Any:
    block = _extract_json_block(text)
    try:
        return json.loads(block)
    except json.JSONDecodeError:
        pass
    try:
        return json.loads(_repair_json(block))
    except json.JSONDecodeError as exc:
        raise RatingParseError(f"unparseable judge JSON: {exc}") from exc


def parse_ratings(text: str) -> list[EvidenceRating]:
    """Parse the judge's ``report_evaluation`` array into ratings."""
    data = parse_json_leniently(text)
    if not isinstance(data, dict) or "report_evaluation" not in data:
        raise RatingParseError("judge output lacks the report_evaluation array")
    items = data["report_evaluation"]
    if not isinstance(items, list):
        raise RatingParseError("report_evaluation is not an array")
    ratings = []
    for position, item in enumerate(items):
        if not isinstance(item, dict):
            raise RatingParseError(f"rating {position} is not an object")
        missing = [a for a in ASPECTS if a not in item]
        if missing:
            raise RatingParseError(
                f"rating {position} lacks aspect(s): {', '.join(missing)}"
            )
        ratings.append(EvidenceRating(
            evidence=str(item.get("evidence", "")).strip(),
            **{aspect: parse_likert(item[aspect]) for aspect in ASPECTS},
        ))
    return ratings


def evaluate_report_quality(unfiltered: UnfilteredReport,
                            backend: Backend) -> list[EvidenceRating]:
    """Likert-rate every evidence item of a report on the four aspects."""
    from .agents import render_report

    prompt = prompts.EVALUATION_PROMPT.format(report_to_evaluate=render_report(unfiltered))
    response = backend.complete(CompletionRequest(messages=(
        ChatMessage(role="user", content=prompt),
    )))
    ratings = parse_ratings(response.text)
    expected = len(unfiltered.all_evidence)
    if len(ratings) != expected:
        raise IncompleteEvaluation(
            f"report has {expected} evidence items but judge returned {len(ratings)} ratings"
        )
    return ratings


def aggregate_likert(ratings: Sequence[EvidenceRating], aspect: str) -> LikertDistribution:
    """Per-level counts plus the agree-or-above fraction for one aspect."""
    if not ratings:
        raise EmptyRatings("no ratings to aggregate")
    counts = {level: 0 for level in LikertLevel}
    for rating in ratings:
        counts[rating.aspect(aspect)] += 1
    top_two = counts[LikertLevel.AGREE] + counts[LikertLevel.STRONGLY_AGREE]
    return LikertDistribution(counts=counts, top_two_fraction=top_two / len(ratings))


# --- supporting decision steps -----------------------------------------------------


def _steps_block(investigation: Investigation) -> str:
    lines = []
    for step in investigation.steps:
        lines.append(f"Step {step.index}:")
        if step.planning:
            lines.append(f"  Planning: {step.planning}")
        if step.analysis:
            lines.append(f"  Analysis: {step.analysis}")
    return "\n".join(lines)


def _normalize_step_label(value: str) -> str:
    cleaned = re.sub(r"[\s_-]+", " ", str(value)).strip().lower()
    if cleaned in ("supporting", "support", "s"):
        return SUPPORTING
    if cleaned in ("non supporting", "nonsupporting", "not supporting", "n"):
        return NON_SUPPORTING
    raise LabelParseError(f"unknown step label {value!r}")


def label_supporting_steps(investigation: Investigation,
                           backend: Backend) -> dict[int, str]:
    """Judge each step as supporting or not, given the final verdict."""
    if investigation.verdict is None:
        raise LabelParseError(
            f"investigation {investigation.id} has no verdict to judge against"
        )
    verdict = "FRAUDULENT" if investigation.verdict.fraudulent else "LEGITIMATE"
    prompt = prompts.SUPPORTING_STEPS_TEMPLATE.format(
        verdict=verdict, steps=_steps_block(investigation)
    )
    response = backend.complete(CompletionRequest(messages=(
        ChatMessage(role="user", content=prompt),
    )))
    data = parse_json_leniently(response.text)
    raw = data.get("labels") if isinstance(data, dict) else None
    if not isinstance(raw, dict):
        raise LabelParseError("judge output lacks a labels object")
    valid_indices = {step.index for step in investigation.steps}
    labels: dict[int, str] = {}
    for key, value in raw.items():
        try:
            index = int(key)
        except (TypeError, ValueError):
            raise LabelParseError(f"step index {key!r} is not an integer") from None
        if index not in valid_indices:
            raise UnknownStepIndex(
                f"judge labeled step {index}, but steps are {sorted(valid_indices)}"
            )
        labels[index] = _normalize_step_label(value)
    missing = valid_indices - labels.keys()
    if missing:
        raise LabelParseError(f"judge left step(s) unlabeled: {sorted(missing)}")
    return labels


def min_trajectory_ratio(investigation: Investigation,
                         labels: Mapping[int, str]) -> Fraction:
    """|supporting steps| / |steps| as an exact rational."""
    step_indices = {step.index for step in investigation.steps}
    if set(labels) != step_indices:
        raise LabelCoverageMismatch(
            f"labels cover {sorted(labels)} but steps are {sorted(step_indices)}"
        )
    supporting = sum(1 for value in labels.values() if value == SUPPORTING)
    return Fraction(supporting, len(step_indices))


def format_ratio(ratio: Fraction, places: int = 4) -> str:
    return f"{float(ratio):.{places}f}"


@dataclass(frozen=True)
class EfficiencyMetrics:
    step_count: int
    input_tokens: int
    output_tokens: int
    min_trajectory_ratio: Fraction
    counter: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "step_count": self.step_count,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "min_trajectory_ratio": format_ratio(self.min_trajectory_ratio),
            "counter": self.counter,
            "note": IMAGE_TOKENS_NOTE,
        }


def efficiency_metrics(investigation: Investigation,
                       labels: Mapping[int, str]) -> EfficiencyMetrics:
    input_tokens, output_tokens = investigation_token_usage(investigation)
    return EfficiencyMetrics(
        step_count=len(investigation.steps),
        input_tokens=input_tokens,
        output_tokens=output_tokens,
        min_trajectory_ratio=min_trajectory_ratio(investigation, labels),
        counter=investigation.counter_name,
    )


def investigation_token_usage(investigation: Investigation) -> tuple[int, int]:
    """Component-wise token sums across all completions of a run."""
    return investigation.usage.input_tokens, investigation.usage.output_tokens


# --- detection metrics ---------------------------------------------------------------


@dataclass(frozen=True)
class DetectionMetrics:
    """Confusion counts with derived rates; fraud is the positive class.

    When a denominator is empty the rate is 0.0 and the matching
    ``*_defined`` flag is False, so the numbers stay total and honest.
    """

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def precision_defined(self) -> bool:
        return (self.tp + self.fp) > 0

    @property
    def recall_defined(self) -> bool:
        return (self.tp + self.fn) > 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.precision_defined else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.recall_defined else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if (p + r) > 0 else 0.0

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall,
            "f1": self.f1, "accuracy": self.accuracy,
            "precision_defined": self.precision_defined,
            "recall_defined": self.recall_defined,
        }

    def format_table(self) -> str:
        """Actual-by-predicted layout with row, column, and grand totals."""
        rows = [
            ("", "Predicted Not Fraud", "Predicted Fraud", "Total"),
            ("Actual Not Fraud", str(self.tn), str(self.fp), str(self.tn + self.fp)),
            ("Actual Fraud", str(self.fn), str(self.tp), str(self.fn + self.tp)),
            ("Total", str(self.tn + self.fn), str(self.fp + self.tp), str(self.total)),
        ]
        widths = [max(len(row[i]) for row in rows) for i in range(4)]
        return "\n".join(
            "  ".join(cell.rjust(widths[i]) for i, cell in enumerate(row))
            for row in rows
        )


def detection_metrics(predicted: Sequence[bool], actual: Sequence[bool]) -> DetectionMetrics:
    """Confusion matrix from paired verdicts and ground-truth labels."""
    if len(predicted) != len(actual):
        raise LengthMismatch(
            f"{len(predicted)} predictions vs {len(actual)} labels"
        )
    tp = tn = fp = fn = 0
    for guess, truth in zip(predicted, actual):
        if guess and truth:
            tp += 1
        elif guess and not truth:
            fp += 1
        elif not guess and truth:
            fn += 1
        else:
            tn += 1
    return DetectionMetrics(tp=tp, tn=tn, fp=fp, fn=fn)


# --- step categorization --------------------------------------------------------------


def categorize_steps(investigations: Sequence[Investigation],
                     backend: Backend) -> dict[str, int]:
    """Histogram of step categories, one judged tag per step."""
    histogram: dict[str, int] = {}
    for investigation in investigations:
        if not investigation.steps:
            continue
        prompt = prompts.CATEGORIZE_TEMPLATE.format(
            categories=", ".join(CATEGORY_SEEDS),
            steps=_steps_block(investigation),
        )
        response = backend.complete(CompletionRequest(messages=(
            ChatMessage(role="user", content=prompt),
        )))
        data = parse_json_leniently(response.text)
        raw = data.get("categories") if isinstance(data, dict) else None
        if not isinstance(raw, dict):
            raise LabelParseError("judge output lacks a categories object")
        valid = {step.index for step in investigation.steps}
        seen: set[int] = set()
        for key, value in raw.items():
            try:
                index = int(key)
            except (TypeError, ValueError):
                raise LabelParseError(f"step index {key!r} is not an integer") from None
            if index not in valid:
                raise UnknownStepIndex(
                    f"judge categorized step {index}, but steps are {sorted(valid)}"
                )
            seen.add(index)
            tag = re.sub(r"\s+", " ", str(value)).strip().lower() or "other"
            histogram[tag] = histogram.get(tag, 0) + 1
        missing = valid - seen
        if missing:
            raise LabelParseError(f"judge left step(s) uncategorized: {sorted(missing)}")
    return histogram


# --- memorization checks ----------------------------------------------------------------


# Features inferable from the rest of the record by plain domain knowledge,
# plus the label itself; never hidden in the completion check.
EXCLUDED_FEATURES = ("city", "state", "zip", "gender", "is_fraud")


def _normalize_feature(name: str) -> str:
    return re.sub(r"[\s-]+", "_", name.strip().lower()).rstrip("?")


def _isfraud_column(dataset: Dataset) -> str:
    for column in dataset.schema.by_name:
        if _normalize_feature(column) == "is_fraud":
            return column
    raise InsufficientRows("dataset has no is_fraud column")


def stratified_sample(dataset: Dataset, per_class: int, seed: int) -> tuple[list, list]:
    """(legitimate rows, fraud rows), each of size per_class, seed-stable."""
    label_col = _isfraud_column(dataset)
    fraud = [row for row in dataset.rows if row.get(label_col) == 1]
    legit = [row for row in dataset.rows if row.get(label_col) == 0]
    if len(fraud) < per_class or len(legit) < per_class:
        raise InsufficientRows(
            f"need {per_class} rows per class, have {len(fraud)} fraud / {len(legit)} legitimate"
        )
    rng = random.Random(seed)
    key = dataset.key_of
    legit_sample = rng.sample(sorted(legit, key=key), per_class)
    fraud_sample = rng.sample(sorted(fraud, key=key), per_class)
    return legit_sample, fraud_sample


def _render_record(row: Mapping[str, Any], hidden: Iterable[str] = (),
                   drop: Iterable[str] = ()) -> str:
    hidden = set(hidden)
    drop = set(drop)
    lines = []
    for column, value in row.items():
        if column in drop:
            continue
        shown = "[HIDDEN]" if column in hidden else value
        lines.append(f"{column}: {shown}")
    return "\n".join(lines)


def normalize_feature_value(value: Any) -> str:
    """Exact-match normalization: trim plus numeric folding ("1.0" == "1")."""
    text = str(value).strip()
    try:
        number = float(text)
    except ValueError:
        return text
    if number == int(number):
        return str(int(number))
    return repr(number)


@dataclass(frozen=True)
class FeatureCompletionResult:
    accuracy: float
    tests: tuple[dict[str, Any], ...]
    per_feature: Mapping[str, tuple[int, int]]  # column -> (correct, total)

    @property
    def test_count(self) -> int:
        return len(self.tests)

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "test_count": self.test_count,
            "per_feature": {k: list(v) for k, v in self.per_feature.items()},
            "tests": [dict(t) for t in self.tests],
        }


def memorization_feature_completion(
    dataset: Dataset,
    backend: Backend,
    sample_size: int = 50,
    hidden_per_row: int = 3,
    seed: int = 0,
) -> FeatureCompletionResult:
    """Hide features per sampled row and ask the backend to complete them.

    A stratified half-fraud/half-legitimate sample of ``sample_size`` rows
    yields ``sample_size * hidden_per_row`` single-feature prediction tests.
    The label column is withheld from every shown record.
    """
    per_class = sample_size // 2
    legit, fraud = stratified_sample(dataset, per_class, seed)
    label_col = _isfraud_column(dataset)
    excluded = set(EXCLUDED_FEATURES)
    eligible = [
        column for column in dataset.schema.by_name
        if _normalize_feature(column) not in excluded
    ]
    if len(eligible) < hidden_per_row:
        raise InsufficientRows(
            f"only {len(eligible)} hideable columns, need {hidden_per_row}"
        )
    rng = random.Random(seed)
    tests: list[dict[str, Any]] = []
    per_feature: dict[str, list[int]] = {}
    correct_total = 0
    for row in legit + fraud:
        hidden = rng.sample(eligible, hidden_per_row)
        record_text = _render_record(row, hidden=hidden, drop={label_col})
        for column in hidden:
            prompt = prompts.FEATURE_COMPLETION_TEMPLATE.format(
                column=column, record=record_text
            )
            response = backend.complete(CompletionRequest(messages=(
                ChatMessage(role="user", content=prompt),
            )))
            predicted = response.text.strip().splitlines()[0].strip() if response.text.strip() else ""
            expected = row.get(column)
            hit = normalize_feature_value(predicted) == normalize_feature_value(expected)
            correct_total += hit
            bucket = per_feature.setdefault(column, [0, 0])
            bucket[0] += hit
            bucket[1] += 1
            tests.append({
                "trans_num": dataset.key_of(row),
                "column": column,
                "expected": str(expected),
                "predicted": predicted,
                "correct": hit,
            })
    return FeatureCompletionResult(
        accuracy=correct_total / len(tests) if tests else 0.0,
        tests=tuple(tests),
        per_feature={k: (v[0], v[1]) for k, v in per_feature.items()},
    )


@dataclass(frozen=True)
class IsFraudCheckResult:
    matrix: DetectionMetrics
    abstentions: int

    def to_dict(self) -> dict[str, Any]:
        return {"matrix": self.matrix.to_dict(), "abstentions": self.abstentions}


def memorization_isfraud_check(dataset: Dataset, backend: Backend,
                               seed: int = 0) -> IsFraudCheckResult:
    """Classify a balanced sample row by row; unparseable replies abstain."""
    legit, fraud = stratified_sample(dataset, 25, seed)
    label_col = _isfraud_column(dataset)
    predicted: list[bool] = []
    actual: list[bool] = []
    abstentions = 0
    for row in legit + fraud:
        prompt = prompts.ISFRAUD_TEMPLATE.format(
            record=_render_record(row, drop={label_col})
        )
        response = backend.complete(CompletionRequest(messages=(
            ChatMessage(role="user", content=prompt),
        )))
        text = response.text.lower()
        if "not fraud" in text:
            guess = False
        elif "fraud" in text:
            guess = True
        else:
            abstentions += 1
            continue
        predicted.append(guess)
        actual.append(row.get(label_col) == 1)
    if not predicted:
        raise VerdictParseError("every classification reply was unparseable")
    return IsFraudCheckResult(
        matrix=detection_metrics(predicted, actual), abstentions=abstentions
    )


# --- batch summaries ----------------------------------------------------------------


def write_summary_csv(path: str | Path, rows: Sequence[Mapping[str, Any]]) -> None:
    """One row per investigation: steps, tokens, ratio, verdict, label."""
    fields = ["id", "trans_num", "status", "steps", "input_tokens", "output_tokens",
              "min_trajectory_ratio", "verdict", "label", "counter"]
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})


def write_likert_table(path: str | Path, aspect: str,
                       distribution: LikertDistribution) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["aspect", "level", "rank", "count"])
        for level in LikertLevel:
            writer.writerow([aspect, level.name.lower(), int(level),
                             distribution.counts.get(level, 0)])
        writer.writerow([aspect, "top_two_fraction", "",
                         f"{distribution.top_two_fraction:.4f}"])
