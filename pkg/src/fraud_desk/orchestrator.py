"""The investigation loop: prompts in, steps out, reports at the end.

One investigation is strictly sequential. The conversation is an explicit
message list owned here, so any backend (live or scripted) sees identical
prompts and a run can be replayed digest-for-digest.
"""

from __future__ import annotations

import json
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from . import agents, prompts
from .agents import FilteredReport, UnfilteredReport, Verdict
from .datastore import Dataset, lookup_transaction
from .errors import (
    AlertInvalid,
    AuthMissing,
    BackendUnavailable,
    EmptyTransNum,
    FraudDeskError,
    InvestigationNotRunning,
    MalformedStep,
    TranscriptDivergence,
    TranscriptExhausted,
)
from .gateway import (
    Backend,
    ChatMessage,
    CompletionRequest,
    CompletionResponse,
    ToolCall,
    Usage,
    prompt_digest,
)
from .tools import ToolContext, ToolResult, dispatch_tool, tool_descriptors

DEFAULT_MAX_STEPS = 15
# Hard cap on tool-call rounds within one step, so a run is bounded by
# max_steps * (TOOL_ROUNDS_PER_STEP + retries) completions.
TOOL_ROUNDS_PER_STEP = 8

STATUS_RUNNING = "running"
STATUS_COMPLETED = "completed"
STATUS_BUDGET_EXHAUSTED = "budget_exhausted"
STATUS_FAILED = "failed"

STOP_MODEL_CONCLUDED = "model_concluded"
STOP_MAX_STEPS = "max_steps_reached"
STOP_BACKEND_FAILURE = "backend_failure"
STOP_PARSE_FAILURE = "parse_failure"


@dataclass(frozen=True)
class Alert:
    trans_num: str


@dataclass
class InvestigationStep:
    index: int
    planning: str
    gathering: list[tuple[ToolCall, ToolResult]]
    analysis: str
    charts_rendered: int = 0
    is_terminal: bool = False
    raw_text: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "planning": self.planning,
            "gathering": [
                {"call": call.to_dict(), "result": result.to_dict()}
                for call, result in self.gathering
            ],
            "analysis": self.analysis,
            "charts_rendered": self.charts_rendered,
            "is_terminal": self.is_terminal,
            "raw_text": self.raw_text,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "InvestigationStep":
        return cls(
            index=int(data["index"]),
            planning=str(data["planning"]),
            gathering=[
                (ToolCall.from_dict(g["call"]), ToolResult.from_dict(g["result"]))
                for g in data.get("gathering") or ()
            ],
            analysis=str(data["analysis"]),
            charts_rendered=int(data.get("charts_rendered", 0)),
            is_terminal=bool(data.get("is_terminal", False)),
            raw_text=str(data.get("raw_text", "")),
        )


@dataclass
class Investigation:
    id: str
    alert: Alert
    max_steps: int = DEFAULT_MAX_STEPS
    status: str = STATUS_RUNNING
    stop_reason: str | None = None
    stop_detail: str = ""
    steps: list[InvestigationStep] = field(default_factory=list)
    messages: list[ChatMessage] = field(default_factory=list)
    usage: Usage = Usage()
    counter_name: str = ""
    prompt_digests: list[str] = field(default_factory=list)
    unfiltered_report: UnfilteredReport | None = None
    filtered_report: FilteredReport | None = None
    verdict: Verdict | None = None

    @property
    def running(self) -> bool:
        return self.status == STATUS_RUNNING

    def finish(self, status: str, stop_reason: str, detail: str = "") -> None:
        if self.stop_reason is not None:
            raise RuntimeError(f"stop_reason already set for {self.id}")
        self.status = status
        self.stop_reason = stop_reason
        self.stop_detail = detail

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "alert": {"trans_num": self.alert.trans_num},
            "status": self.status,
            "stop_reason": self.stop_reason,
            "stop_detail": self.stop_detail,
            "max_steps": self.max_steps,
            "counter": self.counter_name,
            "usage": {"input_tokens": self.usage.input_tokens,
                      "output_tokens": self.usage.output_tokens},
            "prompt_digests": list(self.prompt_digests),
            "steps": [step.to_dict() for step in self.steps],
            "unfiltered_report": (
                self.unfiltered_report.to_dict() if self.unfiltered_report else None
            ),
            "filtered_report": (
                self.filtered_report.to_dict() if self.filtered_report else None
            ),
            "verdict": self.verdict.to_dict() if self.verdict else None,
        }


class Session:
    """Meters every completion of a run: usage totals plus a digest audit trail."""

    def __init__(self, backend: Backend):
        self.backend = backend
        self.usage = Usage()
        self.digests: list[str] = []
        self.calls = 0

    @property
    def counter(self):
        return self.backend.counter

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        digest = prompt_digest(request)
        response = self.backend.complete(request)
        self.digests.append(digest)
        self.usage += response.usage
        self.calls += 1
        return response


# --- prompt assembly -----------------------------------------------------------


def assemble_initial_prompt(alert: Alert) -> str:
    """The opening message: the alert template with the trans_num filled in."""
    if not alert.trans_num:
        raise EmptyTransNum("alert carries an empty trans_num")
    return prompts.ALERT_TEMPLATE.format(trans_num=alert.trans_num)


def assemble_step_prompt(investigation: Investigation) -> str:
    """Continue-message, step format, and guidelines, concatenated in order.

    The conversation history rides along as context; this function only
    renders the recurring instruction block.
    """
    if not investigation.running:
        raise InvestigationNotRunning(
            f"investigation {investigation.id} is {investigation.status}"
        )
    return "\n".join((
        prompts.NEXT_STEP_MESSAGE,
        prompts.STEP_FORMAT,
        prompts.GUIDELINES + prompts.TERMINATION_INSTRUCTION,
    ))


# --- step parsing ----------------------------------------------------------------


_PHASE_RE = re.compile(
    r"^[ \t>#*-]*(?:\d+\s*[.)]\s*)?(?:\*\*)?\s*"
    r"(?P<name>planning|information[\s_-]*gathering|analysis)"
    r"[\s_-]*phase\b.*$",
    re.IGNORECASE | re.MULTILINE,
)


def _phase_spans(text: str) -> dict[str, tuple[int, int]]:
    found: dict[str, tuple[int, int]] = {}
    for match in _PHASE_RE.finditer(text):
        name = match.group("name").lower()
        key = "gathering" if name.startswith("information") else name
        if key not in found:
            found[key] = (match.start(), match.end())
    return found


def parse_step(response_text: str, tool_trace: Sequence[tuple[ToolCall, ToolResult]],
               index: int = 0) -> InvestigationStep:
    """Split a step reply on its three phase headings and attach the trace."""
    if not response_text.strip():
        raise MalformedStep("empty step response", raw_text=response_text)
    spans = _phase_spans(response_text)
    missing = [name for name in ("planning", "gathering", "analysis") if name not in spans]
    if missing:
        raise MalformedStep(
            f"phase heading(s) absent: {', '.join(missing)}", raw_text=response_text
        )
    p_start, p_end = spans["planning"]
    g_start, g_end = spans["gathering"]
    a_start, a_end = spans["analysis"]
    if not p_start < g_start < a_start:
        raise MalformedStep("phase headings out of order", raw_text=response_text)
    planning = response_text[p_end:g_start].strip()
    analysis = response_text[a_end:].strip()
    trace = list(tool_trace)
    return InvestigationStep(
        index=index,
        planning=planning,
        gathering=trace,
        analysis=analysis,
        charts_rendered=sum(1 for _, result in trace if result.kind == "chart"),
        is_terminal=prompts.CONCLUSION_MARKER in analysis,
        raw_text=response_text,
    )


# --- the loop ---------------------------------------------------------------------


def _run_step(investigation: Investigation, session: Session, context: ToolContext,
              index: int, descriptors) -> InvestigationStep:
    context.begin_step(index)
    texts: list[str] = []
    trace: list[tuple[ToolCall, ToolResult]] = []
    retried = False
    rounds = 0
    while True:
        response = session.complete(CompletionRequest(
            messages=tuple(investigation.messages), tools=descriptors,
        ))
        investigation.messages.append(ChatMessage(
            role="assistant", content=response.text, tool_calls=response.tool_calls,
        ))
        if response.text.strip():
            texts.append(response.text)
        if response.tool_calls:
            rounds += 1
            for call in response.tool_calls:
                result = dispatch_tool(call, context)
                trace.append((call, result))
                investigation.messages.append(ChatMessage(
                    role="tool", content=result.render_text(), tool_call_id=call.id,
                ))
            if rounds < TOOL_ROUNDS_PER_STEP:
                continue
        try:
            return parse_step("\n".join(texts), trace, index=index)
        except MalformedStep:
            if retried:
                raise
            retried = True
            rounds = 0
            texts = []
            investigation.messages.append(ChatMessage(
                role="user",
                content=prompts.STEP_RETRY_PROMPT + prompts.STEP_FORMAT,
            ))


def run_investigation(
    alert: Alert,
    backend: Backend,
    dataset: Dataset,
    max_steps: int = DEFAULT_MAX_STEPS,
    out_dir: str | Path | None = None,
    executor: Any | None = None,
    echo: Callable[[str], None] | None = None,
) -> Investigation:
    """Run one alert end to end and return the Investigation record.

    The alert is validated against the dataset before any backend call. On a
    model-concluded terminal step the report-generating agent and then the
    detective agent run on the same session. Backend loss and irrecoverably
    malformed steps mark the investigation failed rather than raising.
    """
    initial_prompt = assemble_initial_prompt(alert)  # raises EmptyTransNum
    if lookup_transaction(dataset, alert.trans_num) is None:
        raise AlertInvalid(f"trans_num {alert.trans_num!r} is not in the dataset")

    inv_id = "inv_" + re.sub(r"[^A-Za-z0-9_.-]", "_", alert.trans_num)
    investigation = Investigation(id=inv_id, alert=alert, max_steps=max_steps)
    session = Session(backend)
    investigation.counter_name = getattr(session.counter, "name", "unknown")

    scratch: tempfile.TemporaryDirectory | None = None
    if out_dir is not None:
        inv_dir = Path(out_dir) / inv_id
    else:
        scratch = tempfile.TemporaryDirectory(prefix="fraud-desk-")
        inv_dir = Path(scratch.name) / inv_id
    context = ToolContext(
        dataset=dataset,
        charts_dir=inv_dir / "charts",
        investigation_id=inv_id,
        vision=lambda artifact, description: agents.describe_image(
            artifact, description, session
        ),
        executor=executor,
    )
    descriptors = tool_descriptors(include_execute_script=executor is not None)

    investigation.messages.append(ChatMessage(role="user", content=initial_prompt))
    try:
        for index in range(1, max_steps + 1):
            investigation.messages.append(ChatMessage(
                role="user", content=assemble_step_prompt(investigation),
            ))
            step = _run_step(investigation, session, context, index, descriptors)
            investigation.steps.append(step)
            if echo is not None:
                marker = " [terminal]" if step.is_terminal else ""
                echo(f"step {step.index}{marker}: {_summline(step.planning)}")
            if step.is_terminal:
                break
        if investigation.steps and investigation.steps[-1].is_terminal:
            investigation.unfiltered_report = agents.generate_unfiltered_report(
                investigation, session
            )
            investigation.filtered_report = agents.filter_report(
                investigation.unfiltered_report, session
            )
            investigation.verdict = agents.classify_verdict(
                investigation.filtered_report, session
            )
            investigation.finish(STATUS_COMPLETED, STOP_MODEL_CONCLUDED)
            if echo is not None:
                label = "FRAUDULENT" if investigation.verdict.fraudulent else "LEGITIMATE"
                echo(f"verdict: {label}")
        else:
            investigation.finish(STATUS_BUDGET_EXHAUSTED, STOP_MAX_STEPS,
                                 f"no terminal step within {max_steps} steps")
    except (TranscriptExhausted, TranscriptDivergence):
        # Replay faults mean the fixture or prompt assembly broke; surface them.
        raise
    except (BackendUnavailable, AuthMissing) as exc:
        investigation.finish(STATUS_FAILED, STOP_BACKEND_FAILURE,
                             f"{exc.code}: {exc}")
    except MalformedStep as exc:
        investigation.finish(STATUS_FAILED, STOP_PARSE_FAILURE, str(exc))
    except FraudDeskError as exc:
        investigation.finish(STATUS_FAILED, STOP_PARSE_FAILURE,
                             f"{exc.code}: {exc}")
    finally:
        investigation.usage = session.usage
        investigation.prompt_digests = list(session.digests)
        if out_dir is not None:
            save_investigation(investigation, out_dir)
        if scratch is not None:
            scratch.cleanup()
    return investigation


def _summline(text: str, width: int = 88) -> str:
    first = text.strip().splitlines()[0] if text.strip() else ""
    return first if len(first) <= width else first[: width - 3] + "..."


# --- persistence --------------------------------------------------------------------


def investigation_json(investigation: Investigation) -> str:
    return json.dumps(investigation.to_dict(), ensure_ascii=False, indent=2) + "\n"


def save_investigation(investigation: Investigation, out_dir: str | Path) -> Path:
    """Write the investigation record (and reports, when present) to disk."""
    inv_dir = Path(out_dir) / investigation.id
    inv_dir.mkdir(parents=True, exist_ok=True)
    path = inv_dir / "investigation.json"
    path.write_text(investigation_json(investigation), encoding="utf-8")
    if investigation.unfiltered_report is not None:
        (inv_dir / "report.txt").write_text(
            agents.render_report(investigation.unfiltered_report), encoding="utf-8"
        )
        (inv_dir / "report.json").write_text(
            json.dumps(investigation.unfiltered_report.to_dict(),
                       ensure_ascii=False, indent=2) + "\n",
            encoding="utf-8",
        )
    return path


def load_investigation(path: str | Path) -> Investigation:
    """Read a persisted investigation record (conversation is not restored)."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    investigation = Investigation(
        id=str(data["id"]),
        alert=Alert(trans_num=str(data["alert"]["trans_num"])),
        max_steps=int(data.get("max_steps", DEFAULT_MAX_STEPS)),
    )
    investigation.status = str(data["status"])
    investigation.stop_reason = data.get("stop_reason")
    investigation.stop_detail = str(data.get("stop_detail", ""))
    investigation.counter_name = str(data.get("counter", ""))
    usage = data.get("usage") or {}
    investigation.usage = Usage(
        input_tokens=int(usage.get("input_tokens", 0)),
        output_tokens=int(usage.get("output_tokens", 0)),
    )
    investigation.prompt_digests = [str(d) for d in data.get("prompt_digests") or ()]
    investigation.steps = [
        InvestigationStep.from_dict(s) for s in data.get("steps") or ()
    ]
    if data.get("unfiltered_report"):
        investigation.unfiltered_report = UnfilteredReport.from_dict(
            data["unfiltered_report"]
        )
    if data.get("filtered_report") and investigation.unfiltered_report is not None:
        investigation.filtered_report = FilteredReport(
            evidence=tuple(str(e) for e in data["filtered_report"]["evidence"]),
            source=investigation.unfiltered_report,
        )
    if data.get("verdict"):
        investigation.verdict = Verdict.from_dict(data["verdict"])
    return investigation
