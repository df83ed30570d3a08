"""Transaction corpus: ingestion, preprocessing, indexing, queries, aggregates.

A ``Dataset`` is built once from a CSV file and is immutable afterwards, so
handles can be shared freely across concurrent investigations. Merchant names
are scrubbed of the string "fraud" at ingest time; declared numeric/binary
columns are coerced to integers.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from statistics import fmean, pstdev
from typing import Any, Iterable, Mapping, Sequence

from .errors import (
    CoercionFailure,
    DuplicateTransNum,
    EmptyDataset,
    SchemaFileError,
    SchemaMismatch,
    TypeMismatch,
    UnknownColumn,
)

logger = logging.getLogger(__name__)

KINDS = ("identifier", "numeric", "binary", "categorical", "datetime", "geo")

COMPARATORS = ("=", "!=", "<", "<=", ">", ">=", "contains", "between")

_DATETIME_FORMATS = (
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%d/%m/%Y %H:%M",
    "%Y-%m-%d",
    "%d/%m/%Y",
)

_FRAUD_RE = re.compile(r"fraud", re.IGNORECASE)


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaFileError(f"unknown column kind {self.kind!r} for {self.name!r}")


@dataclass(frozen=True)
class DatasetSchema:
    """Column inventory plus the coercion and mapping rules applied at ingest.

    ``key_column`` names the unique transaction id. ``integer_columns`` are
    the numeric columns coerced to int (binary columns always are).
    ``field_map`` maps TransactionRecord field names to source columns when
    the names differ.
    """

    name: str
    columns: tuple[ColumnSpec, ...]
    key_column: str
    integer_columns: frozenset[str] = frozenset()
    merchant_column: str | None = None
    field_map: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(names) != len(set(names)):
            raise SchemaFileError(f"schema {self.name!r} declares a column twice")
        by_name = self.by_name
        if self.key_column not in by_name:
            raise SchemaFileError(f"key column {self.key_column!r} not in schema")
        for col in self.integer_columns:
            if col not in by_name:
                raise SchemaFileError(f"integer column {col!r} not in schema")
        if self.merchant_column is not None and self.merchant_column not in by_name:
            raise SchemaFileError(f"merchant column {self.merchant_column!r} not in schema")
        for fld, col in self.field_map.items():
            if col not in by_name:
                raise SchemaFileError(f"field map {fld!r} -> {col!r}: no such column")
        datetime_columns = [c.name for c in self.columns if c.kind == "datetime"]
        timestamp_col = self.field_map.get("timestamp", "timestamp")
        if len(datetime_columns) > 1 and timestamp_col not in by_name:
            # Some corpora split date and time across columns; do not guess
            # which one is the transaction timestamp.
            logger.warning(
                "schema %r has %d datetime columns and no timestamp mapping; "
                "records will carry no timestamp", self.name, len(datetime_columns),
            )

    @property
    def by_name(self) -> dict[str, ColumnSpec]:
        return {c.name: c for c in self.columns}

    def kind_of(self, column: str) -> str:
        try:
            return self.by_name[column].kind
        except KeyError:
            raise UnknownColumn(f"unknown column {column!r}") from None

    def column_for_field(self, record_field: str) -> str | None:
        col = self.field_map.get(record_field, record_field)
        return col if col in self.by_name else None


@dataclass(frozen=True)
class TransactionRecord:
    """Canonical view of one card transaction row.

    Columns that do not map onto a canonical field are kept in ``extras``.
    """

    trans_num: str
    timestamp: datetime | None = None
    cc_num: str | None = None
    merchant: str | None = None
    category: str | None = None
    amount: float | None = None
    first: str | None = None
    last: str | None = None
    gender: str | None = None
    street: str | None = None
    city: str | None = None
    state: str | None = None
    zip: str | None = None
    lat: float | None = None
    long: float | None = None
    job: str | None = None
    dob: datetime | None = None
    merch_lat: float | None = None
    merch_long: float | None = None
    is_fraud: bool | None = None
    extras: Mapping[str, Any] = field(default_factory=dict)

    _CANONICAL = (
        "trans_num", "timestamp", "cc_num", "merchant", "category", "amount",
        "first", "last", "gender", "street", "city", "state", "zip",
        "lat", "long", "job", "dob", "merch_lat", "merch_long", "is_fraud",
    )

    @classmethod
    def from_row(cls, row: Mapping[str, Any], schema: DatasetSchema) -> "TransactionRecord":
        values: dict[str, Any] = {}
        mapped_columns = set()
        for fld in cls._CANONICAL:
            col = schema.column_for_field(fld)
            if col is None:
                continue
            mapped_columns.add(col)
            value = row.get(col)
            if fld == "is_fraud" and value is not None:
                value = bool(value)
            if fld in ("trans_num", "cc_num") and value is not None:
                value = str(value)
            values[fld] = value
        extras = {k: v for k, v in row.items() if k not in mapped_columns}
        return cls(extras=extras, **values)


@dataclass(frozen=True)
class Predicate:
    column: str
    op: str
    value: Any

    def __post_init__(self):
        if self.op not in COMPARATORS:
            raise TypeMismatch(f"unknown comparator {self.op!r}")


@dataclass(frozen=True)
class QueryFilter:
    """Conjunction of predicates with optional ordering and row limit."""

    predicates: tuple[Predicate, ...] = ()
    sort_by: str | None = None
    descending: bool = False
    limit: int | None = None


@dataclass(frozen=True)
class AggregateSpec:
    """What to aggregate: target column, grouping columns, statistics.

    Statistics are drawn from count, sum, mean, std (population), min, max,
    and ``percentile(p)`` with p in [0, 100].
    """

    target: str
    group_by: tuple[str, ...] = ()
    statistics: tuple[str, ...] = ("count",)


@dataclass(frozen=True)
class AggregateRow:
    group: Mapping[str, Any]
    count: int
    stats: Mapping[str, float]
    empty: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "group": dict(self.group),
            "count": self.count,
            "stats": dict(self.stats),
            "empty": self.empty,
        }


class Dataset:
    """Immutable, indexed transaction table. Safe for concurrent readers."""

    def __init__(self, schema: DatasetSchema, rows: Sequence[Mapping[str, Any]], source: str = ""):
        self.schema = schema
        self.source = source
        self._rows = tuple(dict(r) for r in rows)
        self._by_key: dict[str, int] = {}
        self._by_cc: dict[str, list[int]] = {}
        self._by_merchant: dict[str, list[int]] = {}
        cc_col = schema.column_for_field("cc_num")
        merch_col = schema.merchant_column
        for i, row in enumerate(self._rows):
            key = str(row[schema.key_column])
            if key in self._by_key:
                raise DuplicateTransNum(f"duplicate trans_num {key!r} at row {i}")
            self._by_key[key] = i
            if cc_col is not None and row.get(cc_col) is not None:
                self._by_cc.setdefault(str(row[cc_col]), []).append(i)
            if merch_col is not None and row.get(merch_col) is not None:
                self._by_merchant.setdefault(str(row[merch_col]), []).append(i)

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def rows(self) -> tuple[Mapping[str, Any], ...]:
        return self._rows

    def record(self, index: int) -> TransactionRecord:
        return TransactionRecord.from_row(self._rows[index], self.schema)

    def key_of(self, row: Mapping[str, Any]) -> str:
        return str(row[self.schema.key_column])


# --- merchant preprocessing ----------------------------------------------------

def strip_fraud_marker(merchant: str) -> str:
    """Remove the word "fraud" from a merchant name.

    The "fraud_" vendor prefix is dropped when present; any remaining
    case-insensitive occurrence is excised until none survive (removal can
    splice new occurrences together). Doubled spaces are collapsed.
    """
    out = merchant
    if out.startswith("fraud_"):
        out = out[len("fraud_"):]
    while _FRAUD_RE.search(out):
        out = _FRAUD_RE.sub("", out, count=1)
    out = re.sub(r"  +", " ", out)
    return out.strip()


# --- ingestion ------------------------------------------------------------------

def _coerce(value: str, spec: ColumnSpec, schema: DatasetSchema, row_index: int) -> Any:
    text = value.strip()
    if text == "":
        return None
    kind = spec.kind
    if kind in ("identifier", "categorical"):
        return text
    if kind == "binary":
        try:
            number = float(text)
        except ValueError:
            raise CoercionFailure(
                f"row {row_index}: column {spec.name!r} expected binary, got {text!r}",
                row_index,
            ) from None
        as_int = int(number)
        if as_int != number or as_int not in (0, 1):
            raise CoercionFailure(
                f"row {row_index}: column {spec.name!r} binary value {text!r} not in {{0,1}}",
                row_index,
            )
        return as_int
    if kind == "numeric":
        try:
            number = float(text)
        except ValueError:
            raise CoercionFailure(
                f"row {row_index}: column {spec.name!r} expected numeric, got {text!r}",
                row_index,
            ) from None
        if spec.name in schema.integer_columns:
            return int(number)
        return number
    if kind == "geo":
        try:
            degrees = float(text)
        except ValueError:
            raise CoercionFailure(
                f"row {row_index}: column {spec.name!r} expected degrees, got {text!r}",
                row_index,
            ) from None
        lowered = spec.name.lower()
        if "lat" in lowered and not -90.0 <= degrees <= 90.0:
            raise CoercionFailure(
                f"row {row_index}: latitude {degrees} out of [-90, 90] in {spec.name!r}",
                row_index,
            )
        if ("lon" in lowered or "lng" in lowered) and not -180.0 <= degrees <= 180.0:
            raise CoercionFailure(
                f"row {row_index}: longitude {degrees} out of [-180, 180] in {spec.name!r}",
                row_index,
            )
        return degrees
    if kind == "datetime":
        for fmt in _DATETIME_FORMATS:
            try:
                return datetime.strptime(text, fmt)
            except ValueError:
                continue
        raise CoercionFailure(
            f"row {row_index}: column {spec.name!r} unparseable date-time {text!r}",
            row_index,
        )
    raise CoercionFailure(f"row {row_index}: column {spec.name!r} has unknown kind", row_index)


def ingest_and_preprocess(path: str | Path, schema: DatasetSchema) -> Dataset:
    """Read a CSV file into an immutable, preprocessed ``Dataset``.

    The header must carry exactly the schema's columns (any order). Merchant
    names are scrubbed, typed coercions applied, and indices built once.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        expected = [c.name for c in schema.columns]
        if sorted(header) != sorted(expected):
            missing = sorted(set(expected) - set(header))
            extra = sorted(set(header) - set(expected))
            raise SchemaMismatch(
                f"{path}: header does not match schema {schema.name!r}"
                f" (missing {missing}, unexpected {extra})"
            )
        specs = schema.by_name
        rows: list[dict[str, Any]] = []
        for row_index, raw in enumerate(reader):
            if len(raw) != len(header):
                raise CoercionFailure(
                    f"row {row_index}: expected {len(header)} cells, got {len(raw)}",
                    row_index,
                )
            row: dict[str, Any] = {}
            for name, cell in zip(header, raw):
                row[name] = _coerce(cell, specs[name], schema, row_index)
            if schema.merchant_column is not None:
                merchant = row.get(schema.merchant_column)
                if merchant is not None:
                    row[schema.merchant_column] = strip_fraud_marker(str(merchant))
            if row.get(schema.key_column) is None:
                raise CoercionFailure(f"row {row_index}: empty {schema.key_column!r}", row_index)
            rows.append(row)
    if not rows:
        raise EmptyDataset(f"{path}: no data rows")
    dataset = Dataset(schema, rows, source=str(path))
    logger.info("ingested %d rows from %s (schema %s)", len(dataset), path, schema.name)
    return dataset


# --- lookup and query -------------------------------------------------------------

def lookup_transaction(dataset: Dataset, trans_num: str) -> TransactionRecord | None:
    """Return the unique record for ``trans_num``, or None when absent."""
    index = dataset._by_key.get(str(trans_num))
    if index is None:
        return None
    return dataset.record(index)


def _check_comparator(kind: str, op: str, column: str) -> None:
    orderable = kind in ("numeric", "binary", "datetime", "geo")
    if op in ("<", "<=", ">", ">=", "between") and not orderable:
        raise TypeMismatch(f"comparator {op!r} not valid for {kind} column {column!r}")
    if op == "contains" and kind not in ("identifier", "categorical"):
        raise TypeMismatch(f"comparator 'contains' not valid for {kind} column {column!r}")


def _coerce_filter_value(value: Any, kind: str, column: str) -> Any:
    if value is None:
        return None
    try:
        if kind in ("numeric", "geo"):
            return float(value)
        if kind == "binary":
            return int(value)
        if kind == "datetime":
            if isinstance(value, datetime):
                return value
            for fmt in _DATETIME_FORMATS:
                try:
                    return datetime.strptime(str(value), fmt)
                except ValueError:
                    continue
            raise ValueError(value)
        return str(value)
    except (TypeError, ValueError):
        raise TypeMismatch(
            f"value {value!r} incompatible with {kind} column {column!r}"
        ) from None


def _matches(row: Mapping[str, Any], pred: Predicate, schema: DatasetSchema) -> bool:
    kind = schema.kind_of(pred.column)
    _check_comparator(kind, pred.op, pred.column)
    actual = row.get(pred.column)
    if pred.op == "between":
        bounds = pred.value
        if not isinstance(bounds, (list, tuple)) or len(bounds) != 2:
            raise TypeMismatch("'between' takes a [low, high] pair")
        low = _coerce_filter_value(bounds[0], kind, pred.column)
        high = _coerce_filter_value(bounds[1], kind, pred.column)
        return actual is not None and low <= actual <= high
    expected = _coerce_filter_value(pred.value, kind, pred.column)
    if pred.op == "=":
        return actual == expected
    if pred.op == "!=":
        return actual != expected
    if actual is None:
        return False
    if pred.op == "contains":
        return str(expected).lower() in str(actual).lower()
    if pred.op == "<":
        return actual < expected
    if pred.op == "<=":
        return actual <= expected
    if pred.op == ">":
        return actual > expected
    if pred.op == ">=":
        return actual >= expected
    raise TypeMismatch(f"unknown comparator {pred.op!r}")


def query_transactions(dataset: Dataset, query: QueryFilter) -> list[TransactionRecord]:
    """Rows satisfying all predicates, deterministically ordered.

    Output is ordered by the sort key when given, with ties (and the
    no-sort-key case) resolved by trans_num ascending.
    """
    schema = dataset.schema
    for pred in query.predicates:
        schema.kind_of(pred.column)  # raises UnknownColumn early
    if query.sort_by is not None:
        schema.kind_of(query.sort_by)
    matching = [
        row for row in dataset.rows
        if all(_matches(row, pred, schema) for pred in query.predicates)
    ]
    matching.sort(key=dataset.key_of)
    if query.sort_by is not None:
        sort_col = query.sort_by
        missing = [r for r in matching if r.get(sort_col) is None]
        present = [r for r in matching if r.get(sort_col) is not None]
        present.sort(key=lambda r: r[sort_col], reverse=query.descending)
        matching = present + missing
    if query.limit is not None:
        matching = matching[: max(query.limit, 0)]
    return [TransactionRecord.from_row(row, schema) for row in matching]


# --- aggregation -------------------------------------------------------------------

_PERCENTILE_RE = re.compile(r"^percentile\(\s*(\d+(?:\.\d+)?)\s*\)$")


def percentile_linear(values: Sequence[float], p: float) -> float:
    """p-th percentile with linear interpolation between closest ranks."""
    if not values:
        raise ValueError("no values")
    if not 0.0 <= p <= 100.0:
        raise TypeMismatch(f"percentile {p} outside [0, 100]")
    ordered = sorted(values)
    if len(ordered) == 1:
        return float(ordered[0])
    rank = (p / 100.0) * (len(ordered) - 1)
    lower = math.floor(rank)
    upper = math.ceil(rank)
    if lower == upper:
        return float(ordered[lower])
    weight = rank - lower
    return float(ordered[lower] * (1.0 - weight) + ordered[upper] * weight)


def _compute_stat(stat: str, values: list[float]) -> float:
    if stat == "sum":
        return float(sum(values))
    if stat == "mean":
        return float(fmean(values))
    if stat == "std":
        return float(pstdev(values))
    if stat == "min":
        return float(min(values))
    if stat == "max":
        return float(max(values))
    match = _PERCENTILE_RE.match(stat)
    if match:
        return percentile_linear(values, float(match.group(1)))
    raise TypeMismatch(f"unknown statistic {stat!r}")


def aggregate_stats(
    dataset: Dataset,
    spec: AggregateSpec,
    rows: Iterable[Mapping[str, Any]] | None = None,
) -> list[AggregateRow]:
    """Statistics for the target column, optionally grouped.

    Standard deviation is the population form. Groups with no usable target
    values keep their count but report no other statistics (``empty=True``).
    ``rows`` restricts the computation to a pre-filtered subset.
    """
    schema = dataset.schema
    target_kind = schema.kind_of(spec.target)
    for col in spec.group_by:
        schema.kind_of(col)
    wants_numeric = any(s != "count" for s in spec.statistics)
    for stat in spec.statistics:
        if stat != "count" and not _PERCENTILE_RE.match(stat) and stat not in (
            "sum", "mean", "std", "min", "max",
        ):
            raise TypeMismatch(f"unknown statistic {stat!r}")
    if wants_numeric and target_kind not in ("numeric", "binary", "geo"):
        raise TypeMismatch(
            f"target {spec.target!r} is {target_kind}; only count applies"
        )

    source = dataset.rows if rows is None else list(rows)
    groups: dict[tuple, list[Mapping[str, Any]]] = {}
    for row in source:
        key = tuple(row.get(col) for col in spec.group_by)
        groups.setdefault(key, []).append(row)

    out: list[AggregateRow] = []
    for key in sorted(groups, key=lambda k: tuple(str(v) for v in k)):
        members = groups[key]
        values = (
            [float(row[spec.target]) for row in members if row.get(spec.target) is not None]
            if wants_numeric else []
        )
        stats: dict[str, float] = {}
        if "count" in spec.statistics:
            stats["count"] = len(members)
        empty = wants_numeric and not values
        if values:
            for stat in spec.statistics:
                if stat == "count":
                    continue
                stats[stat] = _compute_stat(stat, values)
        out.append(AggregateRow(
            group=dict(zip(spec.group_by, key)),
            count=len(members),
            stats=stats,
            empty=empty,
        ))
    return out


# --- built-in schemas -----------------------------------------------------------------

def _cols(*pairs: tuple[str, str]) -> tuple[ColumnSpec, ...]:
    return tuple(ColumnSpec(name, kind) for name, kind in pairs)


SPARKOV_SCHEMA = DatasetSchema(
    name="sparkov",
    columns=_cols(
        ("trans_date_trans_time", "datetime"),
        ("cc_num", "identifier"),
        ("merchant", "categorical"),
        ("category", "categorical"),
        ("amt", "numeric"),
        ("first", "categorical"),
        ("last", "categorical"),
        ("gender", "categorical"),
        ("street", "categorical"),
        ("city", "categorical"),
        ("state", "categorical"),
        ("zip", "categorical"),
        ("lat", "geo"),
        ("long", "geo"),
        ("city_pop", "numeric"),
        ("job", "categorical"),
        ("dob", "datetime"),
        ("trans_num", "identifier"),
        ("unix_time", "numeric"),
        ("merch_lat", "geo"),
        ("merch_long", "geo"),
        ("is_fraud", "binary"),
    ),
    key_column="trans_num",
    integer_columns=frozenset({"city_pop", "unix_time"}),
    merchant_column="merchant",
    field_map={"timestamp": "trans_date_trans_time", "amount": "amt"},
)

# The public CCTD corpus carries no transaction id; an explicit trans_num
# column is required here so alerts can reference rows.
CCTD_SCHEMA = DatasetSchema(
    name="cctd",
    columns=_cols(
        ("trans_num", "identifier"),
        ("user", "identifier"),
        ("card", "identifier"),
        ("year", "numeric"),
        ("month", "numeric"),
        ("day", "numeric"),
        ("time", "categorical"),
        ("amount", "numeric"),
        ("use_chip", "categorical"),
        ("merchant_name", "categorical"),
        ("merchant_city", "categorical"),
        ("merchant_state", "categorical"),
        ("zip", "categorical"),
        ("mcc", "numeric"),
        ("errors", "categorical"),
        ("is_fraud", "binary"),
    ),
    key_column="trans_num",
    integer_columns=frozenset({"year", "month", "day", "amount", "mcc"}),
    merchant_column="merchant_name",
    field_map={"merchant": "merchant_name", "cc_num": "card"},
)

BUILTIN_SCHEMAS = {"sparkov": SPARKOV_SCHEMA, "cctd": CCTD_SCHEMA}


def load_schema(name_or_path: str) -> DatasetSchema:
    """Resolve a built-in schema name or parse a key-value schema file."""
    if name_or_path in BUILTIN_SCHEMAS:
        return BUILTIN_SCHEMAS[name_or_path]
    return parse_schema_file(Path(name_or_path))


def parse_schema_file(path: Path) -> DatasetSchema:
    """Parse a flat key-value schema file.

    Recognized keys: ``name``, ``key``, ``merchant``, ``integers`` (comma
    separated), ``column.<NAME> = <kind>`` (column order follows file order)
    and ``field.<record_field> = <column>``.
    """
    if not path.exists():
        raise SchemaFileError(f"schema file not found: {path}")
    name = path.stem
    key_column: str | None = None
    merchant: str | None = None
    integers: frozenset[str] = frozenset()
    columns: list[ColumnSpec] = []
    field_map: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise SchemaFileError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key == "name":
            name = value
        elif key == "key":
            key_column = value
        elif key == "merchant":
            merchant = value
        elif key == "integers":
            integers = frozenset(v.strip() for v in value.split(",") if v.strip())
        elif key.startswith("column."):
            columns.append(ColumnSpec(key[len("column."):], value))
        elif key.startswith("field."):
            field_map[key[len("field."):]] = value
        else:
            raise SchemaFileError(f"{path}:{lineno}: unknown key {key!r}")
    if key_column is None:
        raise SchemaFileError(f"{path}: missing 'key = <column>'")
    if not columns:
        raise SchemaFileError(f"{path}: no column.* entries")
    return DatasetSchema(
        name=name,
        columns=tuple(columns),
        key_column=key_column,
        integer_columns=integers,
        merchant_column=merchant,
        field_map=field_map,
    )
