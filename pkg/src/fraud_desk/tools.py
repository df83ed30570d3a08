"""Structured tool registry backing the information-gathering phase.

Tool failures are data, not crashes: ``dispatch_tool`` converts every
problem into an error-kind ``ToolResult`` that is fed back to the model.
Charts are written as standalone SVG files with a JSON sidecar so scripted
runs never need a raster stack.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Mapping

from . import datastore
from .datastore import AggregateSpec, Dataset, Predicate, QueryFilter
from .errors import (
    BadToolArguments,
    CoordinateOutOfRange,
    EmptySeries,
    FraudDeskError,
    NoChartAvailable,
    NotFound,
    SingleChartViolation,
    ToolUnavailable,
    ToolUnknown,
    TranscriptDivergence,
    TranscriptExhausted,
)
from .gateway import ToolCall, ToolDescriptor

EARTH_RADIUS_KM = 6371.0

RESULT_KINDS = ("table", "scalars", "chart", "text", "error")


@dataclass(frozen=True)
class ToolResult:
    call_id: str
    kind: str
    payload: Any = None
    error_code: str | None = None
    message: str | None = None

    def __post_init__(self):
        if self.kind not in RESULT_KINDS:
            raise ValueError(f"unknown result kind {self.kind!r}")
        if self.kind == "error" and (not self.error_code or not self.message):
            raise ValueError("error results must carry a machine code and a message")

    @property
    def is_error(self) -> bool:
        return self.kind == "error"

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"call_id": self.call_id, "kind": self.kind,
                               "payload": self.payload}
        if self.kind == "error":
            out["error_code"] = self.error_code
            out["message"] = self.message
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ToolResult":
        return cls(call_id=str(data["call_id"]), kind=str(data["kind"]),
                   payload=data.get("payload"),
                   error_code=data.get("error_code"), message=data.get("message"))

    def render_text(self) -> str:
        """Flat text form, used as the tool message content sent back."""
        if self.kind == "error":
            return f"ERROR {self.error_code}: {self.message}"
        if self.kind == "chart":
            return f"Chart saved: {self.payload['path']}. {self.payload['description']}"
        if self.kind == "text":
            return str(self.payload)
        return json.dumps(self.payload, ensure_ascii=False, default=str)


# --- charts -----------------------------------------------------------------------


@dataclass(frozen=True)
class ChartSeries:
    label: str
    xs: tuple[float, ...] = ()
    ys: tuple[float, ...] = ()


@dataclass(frozen=True)
class ChartSpec:
    """Declarative chart description; the sidecar JSON mirrors it exactly."""

    kind: str
    series: tuple[ChartSeries, ...]
    x_label: str = ""
    y_label: str = ""
    title: str = ""
    highlight: tuple[float, float] | None = None
    bins: int | None = None

    def __post_init__(self):
        if self.kind not in ("scatter", "line", "bar", "histogram"):
            raise BadToolArguments(f"unknown chart kind {self.kind!r}")
        if not self.series:
            raise EmptySeries("chart needs at least one series")
        for s in self.series:
            if self.kind == "histogram":
                if not s.ys and self.bins is None:
                    raise EmptySeries(f"series {s.label!r} has no values")
            elif not s.ys:
                raise EmptySeries(f"series {s.label!r} has no points")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "series": [
                {"label": s.label, "xs": list(s.xs), "ys": list(s.ys)}
                for s in self.series
            ],
            "axes": {"x": self.x_label, "y": self.y_label},
            "title": self.title,
            "highlight": list(self.highlight) if self.highlight else None,
            "bins": self.bins,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ChartSpec":
        axes = data.get("axes") or {}
        highlight = data.get("highlight")
        return cls(
            kind=str(data["kind"]),
            series=tuple(
                ChartSeries(
                    label=str(s.get("label", "")),
                    xs=tuple(float(v) for v in s.get("xs") or ()),
                    ys=tuple(float(v) for v in s.get("ys") or ()),
                )
                for s in data.get("series") or ()
            ),
            x_label=str(axes.get("x", "")),
            y_label=str(axes.get("y", "")),
            title=str(data.get("title", "")),
            highlight=(float(highlight[0]), float(highlight[1])) if highlight else None,
            bins=int(data["bins"]) if data.get("bins") is not None else None,
        )


def parse_chart_sidecar(path: str | Path) -> ChartSpec:
    return ChartSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


_PALETTE = ("#2563eb", "#dc2626", "#059669", "#d97706", "#7c3aed", "#0891b2")
_W, _H, _PAD = 640, 400, 48


def _escape(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def _spans(values: list[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if lo == hi:
        lo, hi = lo - 1.0, hi + 1.0
    return lo, hi


def _histogram_bins(values: tuple[float, ...], bins: int) -> list[tuple[float, float, int]]:
    if not values:
        return [(float(i), float(i + 1), 0) for i in range(bins)]
    lo, hi = _spans(list(values))
    width = (hi - lo) / bins
    counts = [0] * bins
    for v in values:
        slot = min(int((v - lo) / width), bins - 1)
        counts[slot] += 1
    return [(lo + i * width, lo + (i + 1) * width, counts[i]) for i in range(bins)]


def render_chart_svg(spec: ChartSpec) -> str:
    """Deterministic standalone SVG for a chart spec (no timestamps, no ids)."""
    xs_all: list[float] = []
    ys_all: list[float] = []
    hist = None
    if spec.kind == "histogram":
        hist = [
            _histogram_bins(s.ys, spec.bins or 10)
            for s in spec.series
        ]
        for series_bins in hist:
            for lo, hi, count in series_bins:
                xs_all.extend((lo, hi))
                ys_all.append(float(count))
        ys_all.append(0.0)
    else:
        for s in spec.series:
            xs = s.xs if s.xs else tuple(range(len(s.ys)))
            xs_all.extend(xs)
            ys_all.extend(s.ys)
        if spec.kind == "bar":
            ys_all.append(0.0)
    if spec.highlight:
        xs_all.append(spec.highlight[0])
        ys_all.append(spec.highlight[1])
    x_lo, x_hi = _spans(xs_all)
    y_lo, y_hi = _spans(ys_all)

    def px(x: float) -> float:
        return _PAD + (x - x_lo) / (x_hi - x_lo) * (_W - 2 * _PAD)

    def py(y: float) -> float:
        return _H - _PAD - (y - y_lo) / (y_hi - y_lo) * (_H - 2 * _PAD)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="#111"/>',
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="#111"/>',
        f'<text x="{_W / 2:.1f}" y="24" text-anchor="middle" font-size="16">'
        f'{_escape(spec.title)}</text>',
        f'<text x="{_W / 2:.1f}" y="{_H - 12}" text-anchor="middle" font-size="12">'
        f'{_escape(spec.x_label)}</text>',
        f'<text x="16" y="{_H / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {_H / 2:.1f})">{_escape(spec.y_label)}</text>',
    ]
    for i, s in enumerate(spec.series):
        color = _PALETTE[i % len(_PALETTE)]
        if spec.kind == "histogram":
            for lo, hi, count in hist[i]:
                if count == 0:
                    continue
                parts.append(
                    f'<rect x="{px(lo):.2f}" y="{py(count):.2f}" '
                    f'width="{max(px(hi) - px(lo) - 1, 1):.2f}" '
                    f'height="{py(0) - py(count):.2f}" fill="{color}" fill-opacity="0.7"/>'
                )
        elif spec.kind == "bar":
            xs = s.xs if s.xs else tuple(range(len(s.ys)))
            width = max((_W - 2 * _PAD) / (len(s.ys) * (len(spec.series) + 1)), 2)
            for x, y in zip(xs, s.ys):
                parts.append(
                    f'<rect x="{px(x) + i * width - width * len(spec.series) / 2:.2f}" '
                    f'y="{py(max(y, 0)):.2f}" width="{width:.2f}" '
                    f'height="{abs(py(0) - py(y)):.2f}" fill="{color}"/>'
                )
        elif spec.kind == "line":
            xs = s.xs if s.xs else tuple(range(len(s.ys)))
            points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, s.ys))
            parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" '
                         f'stroke-width="2"/>')
        else:
            xs = s.xs if s.xs else tuple(range(len(s.ys)))
            for x, y in zip(xs, s.ys):
                parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3.5" '
                             f'fill="{color}" fill-opacity="0.8"/>')
        parts.append(
            f'<text x="{_W - _PAD + 4}" y="{_PAD + 14 * i}" font-size="11" fill="{color}" '
            f'text-anchor="start">{_escape(s.label)}</text>'
        )
    if spec.highlight:
        hx, hy = spec.highlight
        parts.append(
            f'<circle cx="{px(hx):.2f}" cy="{py(hy):.2f}" r="7" fill="none" '
            f'stroke="#dc2626" stroke-width="2.5"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def describe_chart(spec: ChartSpec) -> str:
    """Plain-text account of a chart: kind, series sizes, ranges, highlight."""
    bits = [f"{spec.kind} chart"]
    if spec.title:
        bits[0] += f" titled {spec.title!r}"
    for s in spec.series:
        values = s.ys
        if values:
            bits.append(
                f"series {s.label!r}: {len(values)} points, "
                f"y range {min(values):g}..{max(values):g}"
                + (f", x range {min(s.xs):g}..{max(s.xs):g}" if s.xs else "")
            )
        else:
            bits.append(f"series {s.label!r}: empty")
    if spec.x_label or spec.y_label:
        bits.append(f"axes: x={spec.x_label!r}, y={spec.y_label!r}")
    if spec.highlight:
        bits.append(
            f"highlighted point (the transaction under investigation) at "
            f"({spec.highlight[0]:g}, {spec.highlight[1]:g})"
        )
    return "; ".join(bits) + "."


# --- geodistance -------------------------------------------------------------------


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in kilometers on a 6371.0 km sphere."""
    for name, value, bound in (("lat1", lat1, 90.0), ("lat2", lat2, 90.0)):
        if not -bound <= value <= bound:
            raise CoordinateOutOfRange(f"{name}={value} outside [-90, 90]")
    for name, value in (("lon1", lon1), ("lon2", lon2)):
        if not -180.0 <= value <= 180.0:
            raise CoordinateOutOfRange(f"{name}={value} outside [-180, 180]")
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


# --- execution context ---------------------------------------------------------------


@dataclass
class ToolContext:
    """Per-investigation state the tools need.

    Contexts are never shared between investigations, which is what makes
    the stateless registry safe under concurrency.
    """

    dataset: Dataset
    charts_dir: Path
    investigation_id: str = "inv"
    vision: Callable[[str, str], str] | None = None
    executor: Any | None = None  # duck-typed: .exec_script(source, timeout_ms) -> dict
    step_index: int = 0
    step_chart_count: int = 0
    charts_rendered_total: int = 0
    last_chart_path: Path | None = None

    def begin_step(self, index: int) -> None:
        self.step_index = index
        self.step_chart_count = 0


# --- individual tools ----------------------------------------------------------------


def _parse_filter(args: Mapping[str, Any]) -> QueryFilter:
    predicates = []
    for raw in args.get("filters") or ():
        if not isinstance(raw, Mapping) or not {"column", "op"} <= set(raw):
            raise BadToolArguments(f"bad filter entry {raw!r}")
        predicates.append(Predicate(column=str(raw["column"]), op=str(raw["op"]),
                                    value=raw.get("value")))
    limit = args.get("limit")
    return QueryFilter(
        predicates=tuple(predicates),
        sort_by=args.get("sort_by"),
        descending=bool(args.get("descending", False)),
        limit=int(limit) if limit is not None else None,
    )


def _record_payload(record: datastore.TransactionRecord) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for fld in datastore.TransactionRecord._CANONICAL:
        value = getattr(record, fld)
        if value is None:
            continue
        out[fld] = value.isoformat(sep=" ") if isinstance(value, datetime) else value
    for key, value in record.extras.items():
        out[key] = value.isoformat(sep=" ") if isinstance(value, datetime) else value
    return out


def _tool_lookup(args: Mapping[str, Any], context: ToolContext) -> tuple[str, Any]:
    trans_num = args.get("trans_num")
    if not trans_num:
        raise BadToolArguments("lookup_transaction requires trans_num")
    record = datastore.lookup_transaction(context.dataset, str(trans_num))
    if record is None:
        raise NotFound(f"no transaction with trans_num {trans_num!r}")
    return "table", [_record_payload(record)]


def _tool_query(args: Mapping[str, Any], context: ToolContext) -> tuple[str, Any]:
    query = _parse_filter(args)
    records = datastore.query_transactions(context.dataset, query)
    return "table", [_record_payload(r) for r in records]


def _tool_aggregate(args: Mapping[str, Any], context: ToolContext) -> tuple[str, Any]:
    target = args.get("target")
    if not target:
        raise BadToolArguments("aggregate_stats requires target")
    spec = AggregateSpec(
        target=str(target),
        group_by=tuple(args.get("group_by") or ()),
        statistics=tuple(args.get("statistics") or ("count",)),
    )
    rows = None
    if args.get("filters"):
        query = _parse_filter({"filters": args["filters"]})
        matched = datastore.query_transactions(context.dataset, query)
        keys = {r.trans_num for r in matched}
        rows = [row for row in context.dataset.rows
                if context.dataset.key_of(row) in keys]
    result = datastore.aggregate_stats(context.dataset, spec, rows=rows)
    return "scalars", [row.to_dict() for row in result]


def _tool_haversine(args: Mapping[str, Any], context: ToolContext) -> tuple[str, Any]:
    try:
        coords = [float(args[k]) for k in ("lat1", "lon1", "lat2", "lon2")]
    except (KeyError, TypeError, ValueError):
        raise BadToolArguments("haversine_km requires numeric lat1, lon1, lat2, lon2") from None
    return "scalars", {"kilometers": haversine_km(*coords)}


def _tool_render_chart(args: Mapping[str, Any], context: ToolContext) -> tuple[str, Any]:
    if context.step_chart_count >= 1:
        raise SingleChartViolation(
            "only one visualization is allowed per investigation step"
        )
    try:
        spec = ChartSpec.from_dict(args)
    except (KeyError, TypeError, ValueError) as exc:
        raise BadToolArguments(f"bad chart spec: {exc}") from None
    context.charts_dir.mkdir(parents=True, exist_ok=True)
    stem = f"step{context.step_index}_chart{context.charts_rendered_total + 1}"
    svg_path = context.charts_dir / f"{stem}.svg"
    sidecar_path = context.charts_dir / f"{stem}.json"
    svg_path.write_text(render_chart_svg(spec), encoding="utf-8")
    sidecar_path.write_text(
        json.dumps(spec.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    context.step_chart_count += 1
    context.charts_rendered_total += 1
    context.last_chart_path = svg_path
    # Persisted paths are relative to the investigation directory so replayed
    # runs produce byte-identical records wherever they land.
    return "chart", {
        "path": f"{context.charts_dir.name}/{svg_path.name}",
        "sidecar": f"{context.charts_dir.name}/{sidecar_path.name}",
        "description": describe_chart(spec),
    }


def _tool_image_to_text(args: Mapping[str, Any], context: ToolContext) -> tuple[str, Any]:
    if context.last_chart_path is None:
        raise NoChartAvailable("no chart has been rendered in this investigation yet")
    description = str(args.get("description") or "").strip()
    if not description:
        description = "chart from ongoing fraud investigation"
    if context.vision is None:
        raise ToolUnavailable("no vision agent is configured")
    return "text", context.vision(str(context.last_chart_path), description)


def _tool_execute_script(args: Mapping[str, Any], context: ToolContext) -> tuple[str, Any]:
    if context.executor is None:
        raise ToolUnavailable("no script executor is configured")
    source = args.get("source")
    if not source:
        raise BadToolArguments("execute_script requires source")
    timeout_ms = args.get("timeout_ms")
    response = context.executor.exec_script(
        str(source), timeout_ms=int(timeout_ms) if timeout_ms else None
    )
    if not response.get("ok"):
        error = response.get("error") or {}
        raise FraudDeskToolError(
            str(error.get("code") or "ScriptError"),
            str(error.get("message") or "script failed"),
        )
    return "text", response.get("stdout") or json.dumps(response.get("value"), default=str)


class FraudDeskToolError(FraudDeskError):
    """Carries an explicit machine code from a foreign tool surface."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self._code = code

    @property
    def code(self) -> str:
        return self._code


_TOOLS: dict[str, Callable[[Mapping[str, Any], ToolContext], tuple[str, Any]]] = {
    "lookup_transaction": _tool_lookup,
    "query_transactions": _tool_query,
    "aggregate_stats": _tool_aggregate,
    "haversine_km": _tool_haversine,
    "render_chart": _tool_render_chart,
    "image_to_text": _tool_image_to_text,
    "execute_script": _tool_execute_script,
}


def dispatch_tool(call: ToolCall, context: ToolContext) -> ToolResult:
    """Route a tool call; always returns a result, never raises.

    The single exception: transcript replay faults (exhaustion, divergence)
    propagate, because they mean the fixture or the prompt assembly broke,
    not the tool.
    """
    handler = _TOOLS.get(call.name)
    if handler is None:
        return ToolResult(call_id=call.id, kind="error", error_code="ToolUnknown",
                          message=f"no tool named {call.name!r}")
    try:
        kind, payload = handler(call.arguments, context)
        return ToolResult(call_id=call.id, kind=kind, payload=payload)
    except (TranscriptExhausted, TranscriptDivergence):
        raise
    except FraudDeskError as exc:
        return ToolResult(call_id=call.id, kind="error", error_code=exc.code,
                          message=str(exc))
    except Exception as exc:  # defensive: argument shapes come from a model
        return ToolResult(call_id=call.id, kind="error", error_code="BadToolArguments",
                          message=f"{type(exc).__name__}: {exc}")


def tool_descriptors(include_execute_script: bool = False) -> tuple[ToolDescriptor, ...]:
    """Descriptors offered to the backend for function calling."""
    filter_schema = {
        "type": "array",
        "items": {
            "type": "object",
            "properties": {
                "column": {"type": "string"},
                "op": {"type": "string", "enum": list(datastore.COMPARATORS)},
                "value": {},
            },
            "required": ["column", "op"],
        },
    }
    series_schema = {
        "type": "array",
        "items": {
            "type": "object",
            "properties": {
                "label": {"type": "string"},
                "xs": {"type": "array", "items": {"type": "number"}},
                "ys": {"type": "array", "items": {"type": "number"}},
            },
            "required": ["label", "ys"],
        },
    }
    descriptors = [
        ToolDescriptor(
            name="lookup_transaction",
            description="Fetch the full record of one transaction by trans_num.",
            parameters={"type": "object",
                        "properties": {"trans_num": {"type": "string"}},
                        "required": ["trans_num"]},
        ),
        ToolDescriptor(
            name="query_transactions",
            description=(
                "Query the transaction database with conjunctive filters; supports "
                "sorting and a row limit. Comparators: = != < <= > >= contains between."
            ),
            parameters={"type": "object", "properties": {
                "filters": filter_schema,
                "sort_by": {"type": "string"},
                "descending": {"type": "boolean"},
                "limit": {"type": "integer"},
            }},
        ),
        ToolDescriptor(
            name="aggregate_stats",
            description=(
                "Compute statistics (count, sum, mean, std, min, max, percentile(p)) "
                "over a column, optionally grouped and optionally pre-filtered."
            ),
            parameters={"type": "object", "properties": {
                "target": {"type": "string"},
                "group_by": {"type": "array", "items": {"type": "string"}},
                "statistics": {"type": "array", "items": {"type": "string"}},
                "filters": filter_schema,
            }, "required": ["target"]},
        ),
        ToolDescriptor(
            name="haversine_km",
            description="Great-circle distance in km between two lat/long points.",
            parameters={"type": "object", "properties": {
                "lat1": {"type": "number"}, "lon1": {"type": "number"},
                "lat2": {"type": "number"}, "lon2": {"type": "number"},
            }, "required": ["lat1", "lon1", "lat2", "lon2"]},
        ),
        ToolDescriptor(
            name="render_chart",
            description=(
                "Render a chart (scatter, line, bar, histogram) to an SVG file. "
                "At most one visualization per investigation step."
            ),
            parameters={"type": "object", "properties": {
                "kind": {"type": "string",
                         "enum": ["scatter", "line", "bar", "histogram"]},
                "series": series_schema,
                "axes": {"type": "object", "properties": {
                    "x": {"type": "string"}, "y": {"type": "string"}}},
                "title": {"type": "string"},
                "highlight": {"type": "array", "items": {"type": "number"}},
                "bins": {"type": "integer"},
            }, "required": ["kind", "series"]},
        ),
        ToolDescriptor(
            name="image_to_text",
            description=(
                "Send the most recently rendered chart to the vision analyst. The "
                "description must include information about the case under "
                "investigation."
            ),
            parameters={"type": "object",
                        "properties": {"description": {"type": "string"}},
                        "required": ["description"]},
        ),
    ]
    if include_execute_script:
        descriptors.append(ToolDescriptor(
            name="execute_script",
            description="Run an analysis script against the dataset in a sandbox.",
            parameters={"type": "object", "properties": {
                "source": {"type": "string"},
                "timeout_ms": {"type": "integer"},
            }, "required": ["source"]},
        ))
    return tuple(descriptors)
