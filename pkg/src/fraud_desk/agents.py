"""Specialist agents: vision analyst, report generation, verdict classifier.

Also owns the report grammar. Reports are bullet-structured documents; the
parser is tolerant on input and the renderer is canonical on output, so
``parse(render(r))`` is the identity for parsed reports.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from . import prompts
from .errors import (
    EmptyInvestigation,
    EmptySelection,
    FilterHallucination,
    MissingArtifact,
    ReportParseError,
    VerdictParseError,
)
from .gateway import Backend, ChatMessage, CompletionRequest, ImageRef

if TYPE_CHECKING:
    from .orchestrator import Investigation

MAX_FILTERED_EVIDENCE = 8


@dataclass(frozen=True)
class ReportStep:
    index: int
    description: str
    evidence: tuple[str, ...]

    def __post_init__(self):
        if not self.evidence:
            raise ReportParseError(f"report step {self.index} carries no evidence")


@dataclass(frozen=True)
class UnfilteredReport:
    steps: tuple[ReportStep, ...]

    def __post_init__(self):
        if not self.steps:
            raise ReportParseError("report has no steps")

    @property
    def all_evidence(self) -> tuple[str, ...]:
        return tuple(e for step in self.steps for e in step.evidence)

    def to_dict(self) -> dict:
        return {"steps": [
            {"index": s.index, "description": s.description, "evidence": list(s.evidence)}
            for s in self.steps
        ]}

    @classmethod
    def from_dict(cls, data: dict) -> "UnfilteredReport":
        return cls(steps=tuple(
            ReportStep(index=int(s["index"]), description=str(s["description"]),
                       evidence=tuple(str(e) for e in s["evidence"]))
            for s in data["steps"]
        ))


@dataclass(frozen=True)
class FilteredReport:
    """Verbatim key-evidence subset, in source-report order."""

    evidence: tuple[str, ...]
    source: UnfilteredReport

    def to_dict(self) -> dict:
        return {"evidence": list(self.evidence)}


@dataclass(frozen=True)
class Verdict:
    fraudulent: bool
    rationale: str
    raw: str

    def to_dict(self) -> dict:
        return {"fraudulent": self.fraudulent, "rationale": self.rationale, "raw": self.raw}

    @classmethod
    def from_dict(cls, data: dict) -> "Verdict":
        return cls(fraudulent=bool(data["fraudulent"]), rationale=str(data["rationale"]),
                   raw=str(data.get("raw", "")))


# --- report grammar -------------------------------------------------------------


_STEP_RE = re.compile(
    r"^\s*[-*]?\s*\*\*\s*step\s+(\d+)\s*:?\s*\*\*:?\s*(.*)$"
    r"|^\s*[-*]\s*step\s+(\d+)\s*:\s*(.*)$",
    re.IGNORECASE,
)
_EVIDENCE_HEADER_RE = re.compile(
    r"^\s*[-*]?\s*(?:\*\*)?\s*evidence\s*:?\s*(?:\*\*)?:?\s*$", re.IGNORECASE
)
_BULLET_RE = re.compile(r"^\s*[-*]\s+(.*\S)\s*$")
_PLACEHOLDER_RE = re.compile(r"^\s*(?:\.{2,}|…)?\s*$")


def parse_report(text: str) -> UnfilteredReport:
    """Parse the bullet report grammar into a structured report.

    Trailing continuation placeholders (a step marker with an ellipsis and no
    evidence, as the grammar's own example shows) are dropped. A step with a
    real description but no evidence block is an error.
    """
    steps: list[ReportStep] = []
    current_index: int | None = None
    current_description = ""
    current_evidence: list[str] = []
    in_evidence = False

    def close_step():
        nonlocal current_index, current_description, current_evidence, in_evidence
        if current_index is None:
            return
        if current_evidence:
            steps.append(ReportStep(
                index=current_index,
                description=current_description.strip(),
                evidence=tuple(current_evidence),
            ))
        elif not _PLACEHOLDER_RE.match(current_description):
            raise ReportParseError(
                f"step {current_index} has a description but no evidence block"
            )
        current_index = None
        current_description = ""
        current_evidence = []
        in_evidence = False

    for line in text.splitlines():
        step_match = _STEP_RE.match(line)
        if step_match:
            close_step()
            if step_match.group(1) is not None:
                current_index = int(step_match.group(1))
                current_description = step_match.group(2) or ""
            else:
                current_index = int(step_match.group(3))
                current_description = step_match.group(4) or ""
            continue
        if current_index is None:
            continue
        if _EVIDENCE_HEADER_RE.match(line):
            in_evidence = True
            continue
        bullet = _BULLET_RE.match(line)
        if in_evidence and bullet:
            current_evidence.append(bullet.group(1))
        elif not in_evidence and not line.strip():
            continue
    close_step()

    if not steps:
        raise ReportParseError("no step marker with an evidence block found")
    return UnfilteredReport(steps=tuple(steps))


def render_report(report: UnfilteredReport) -> str:
    """Canonical text rendering of a report in the bullet grammar."""
    blocks = []
    for step in report.steps:
        lines = [f"- **Step {step.index}:** {step.description}", "  - **Evidence:**"]
        lines.extend(f"    - {evidence}" for evidence in step.evidence)
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


# --- vision agent ----------------------------------------------------------------


def describe_image(artifact: str | Path, description: str, backend: Backend) -> str:
    """Ask the vision analyst to read one chart; returns its analysis text."""
    artifact = Path(artifact)
    if not artifact.exists():
        raise MissingArtifact(f"chart artifact not found: {artifact}")
    request = CompletionRequest(messages=(
        ChatMessage(role="system", content=prompts.VISION_SYSTEM_PROMPT),
        ChatMessage(role="user", content=description,
                    attachments=(ImageRef(path=str(artifact)),)),
    ))
    return backend.complete(request).text


# --- report-generating agent --------------------------------------------------------


def generate_unfiltered_report(investigation: "Investigation", backend: Backend) -> UnfilteredReport:
    """Produce the step-by-step evidence report for a concluded investigation.

    The request rides on the full conversation context; one corrective
    reprompt is attempted when the reply does not parse.
    """
    if not investigation.steps:
        raise EmptyInvestigation(f"investigation {investigation.id} has no steps")
    messages = tuple(investigation.messages) + (
        ChatMessage(role="user", content=prompts.REPORT_PROMPT),
    )
    response = backend.complete(CompletionRequest(messages=messages))
    try:
        return parse_report(response.text)
    except ReportParseError:
        retry_messages = messages + (
            ChatMessage(role="assistant", content=response.text),
            ChatMessage(role="user", content=prompts.REPORT_RETRY_PROMPT),
        )
        retry = backend.complete(CompletionRequest(messages=retry_messages))
        return parse_report(retry.text)


def filter_report(unfiltered: UnfilteredReport, backend: Backend,
                  max_items: int = MAX_FILTERED_EVIDENCE) -> FilteredReport:
    """Select the decision-relevant evidence as a verbatim subset.

    The model's selection is validated string-for-string against the source
    report and re-ordered to the source order.
    """
    prompt = prompts.FILTER_TEMPLATE.format(
        max_items=max_items, report=render_report(unfiltered)
    )
    response = backend.complete(CompletionRequest(messages=(
        ChatMessage(role="user", content=prompt),
    )))
    available = list(unfiltered.all_evidence)
    selected: list[str] = []
    for line in response.text.splitlines():
        bullet = _BULLET_RE.match(line)
        if not bullet:
            continue
        quoted = bullet.group(1).strip()
        if len(quoted) >= 2 and quoted[0] == quoted[-1] and quoted[0] in "\"'":
            unquoted = quoted[1:-1]
            if unquoted in available:
                quoted = unquoted
        if quoted not in available:
            raise FilterHallucination(
                f"selected evidence not present in the source report: {quoted!r}"
            )
        if quoted not in selected:
            selected.append(quoted)
    if not selected:
        raise EmptySelection("the filter selected no evidence")
    ordered: list[str] = []
    for item in available:
        if item in selected and item not in ordered:
            ordered.append(item)
    return FilteredReport(evidence=tuple(ordered), source=unfiltered)


# --- detective agent -----------------------------------------------------------------


_FRAUDULENT_RE = re.compile(r"\bfraudulent\b", re.IGNORECASE)
_LEGITIMATE_RE = re.compile(r"\blegitimate\b", re.IGNORECASE)


def classify_verdict(filtered: FilteredReport, backend: Backend) -> Verdict:
    """Two-label classification from the filtered evidence alone."""
    evidence_block = "\n".join(f"- {e}" for e in filtered.evidence)
    prompt = prompts.DETECTIVE_TEMPLATE.format(evidence=evidence_block)
    response = backend.complete(CompletionRequest(messages=(
        ChatMessage(role="user", content=prompt),
    )))
    text = response.text
    fraud_match = _FRAUDULENT_RE.search(text)
    legit_match = _LEGITIMATE_RE.search(text)
    if fraud_match and legit_match:
        fraudulent = fraud_match.start() < legit_match.start()
        label_end = min(fraud_match.end(), legit_match.end())
    elif fraud_match:
        fraudulent = True
        label_end = fraud_match.end()
    elif legit_match:
        fraudulent = False
        label_end = legit_match.end()
    else:
        raise VerdictParseError("neither FRAUDULENT nor LEGITIMATE found", raw_text=text)
    rationale = text[label_end:].strip(" \t\n-–—:.,")
    return Verdict(fraudulent=fraudulent, rationale=rationale, raw=text)
