"""In-process columnar store for group-by count queries.

Stands in for the distributed OLAP backend: tables are immutable snapshots
of event records, and the single query primitive returns the top slice of
an exact (non-private) group-by count, sorted by count descending with ties
broken by element id ascending.  The privacy layer only ever sees this
slice.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

__all__ = [
    "EventRecord",
    "ColumnMeta",
    "Schema",
    "HistogramSlice",
    "Table",
    "IngestError",
    "QueryError",
    "ingest",
    "load_ndjson",
    "load_csv",
    "normalize_filter",
    "save_snapshot",
    "load_snapshot",
]

RESERVED_FIELDS = ("member_id", "item", "event_date")
DEFAULT_RETENTION_DAYS = 30


class IngestError(ValueError):
    """Schema-invalid rows; carries (row_index, reason) pairs."""

    def __init__(self, offending: list[tuple[int, str]]):
        self.offending = offending
        shown = "; ".join(f"row {i}: {why}" for i, why in offending[:5])
        more = "" if len(offending) <= 5 else f" (+{len(offending) - 5} more)"
        super().__init__(f"schema mismatch: {shown}{more}")


class QueryError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class EventRecord:
    """One engagement event: a member interacted with an item on a date."""

    member_id: str
    item: str
    event_date: date
    dimensions: Mapping[str, str]


@dataclass(frozen=True)
class ColumnMeta:
    """Declared metadata for one groupable column.

    ``domain`` is the full value list for known-domain columns, or None when
    the universe is unknown or too large to enumerate.  ``delta_sensitivity``
    bounds how many counts one member can change (None = unrestricted) and
    ``tau`` bounds how much each count can change.  tau > 1 is declared
    metadata only; the store does not clamp data to it.
    """

    name: str
    domain: tuple[str, ...] | None = None
    delta_sensitivity: int | None = None
    tau: int = 1

    def __post_init__(self) -> None:
        if self.domain is not None:
            if len(set(self.domain)) != len(self.domain):
                raise QueryError(f"column {self.name!r}: declared domain has duplicates")
        if self.delta_sensitivity is not None and self.delta_sensitivity < 1:
            raise QueryError(f"column {self.name!r}: delta sensitivity must be >= 1")
        if self.tau < 1:
            raise QueryError(f"column {self.name!r}: tau must be >= 1")


@dataclass(frozen=True)
class Schema:
    """Column declarations for a table.  ``item`` is always groupable."""

    columns: Mapping[str, ColumnMeta]
    retention_days: int = DEFAULT_RETENTION_DAYS

    @classmethod
    def from_dict(cls, raw: Mapping[str, object]) -> "Schema":
        cols: dict[str, ColumnMeta] = {}
        for name, meta in dict(raw.get("columns", {})).items():
            meta = meta or {}
            domain = meta.get("domain")
            cols[name] = ColumnMeta(
                name=name,
                domain=tuple(domain) if domain is not None else None,
                delta_sensitivity=meta.get("delta"),
                tau=int(meta.get("tau", 1)),
            )
        return cls(columns=cols, retention_days=int(raw.get("retention_days", DEFAULT_RETENTION_DAYS)))

    def to_dict(self) -> dict:
        cols: dict[str, dict] = {}
        for name, meta in self.columns.items():
            entry: dict = {}
            if meta.domain is not None:
                entry["domain"] = list(meta.domain)
            if meta.delta_sensitivity is not None:
                entry["delta"] = meta.delta_sensitivity
            if meta.tau != 1:
                entry["tau"] = meta.tau
            cols[name] = entry
        return {"columns": cols, "retention_days": self.retention_days}

    def dimension_columns(self) -> list[str]:
        return [c for c in self.columns if c != "item"]

    def meta(self, column: str) -> ColumnMeta | None:
        return self.columns.get(column)


@dataclass(frozen=True)
class HistogramSlice:
    """Top slice of an exact group-by count.

    Entries are (element_id, count), count descending, ties by element id
    ascending, at most ``truncated_at`` of them.  Ranks past the real
    entries are conceptually zero; mechanisms pad with 0 as needed.
    """

    entries: tuple[tuple[str, int], ...]
    truncated_at: int
    aggregation: str


def normalize_filter(
    filter_spec: Mapping[str, object] | None,
) -> tuple[tuple[str, tuple[str, ...]], ...]:
    """Normalize a filter to sorted (column, sorted-values) conjunctions."""
    if not filter_spec:
        return ()
    terms = []
    for column in sorted(filter_spec):
        value = filter_spec[column]
        if isinstance(value, str):
            terms.append((column, (value,)))
        else:
            terms.append((column, tuple(sorted({str(v) for v in value}))))
    return tuple(terms)


class Table:
    """Immutable snapshot of ingested events.

    Re-ingesting produces a new table; concurrent reads of one table are
    safe.  Unfiltered count indices are built once at construction.
    """

    def __init__(self, records: Sequence[EventRecord], schema: Schema, as_of: date,
                 rejected_out_of_window: int = 0):
        self.schema = schema
        self.as_of = as_of
        self.rejected_out_of_window = rejected_out_of_window
        self._records = tuple(records)
        dims = schema.dimension_columns()
        self._columns: dict[str, list[str]] = {c: [] for c in dims}
        self._columns["item"] = []
        self._members: list[str] = []
        for r in self._records:
            self._members.append(r.member_id)
            self._columns["item"].append(r.item)
            for c in dims:
                self._columns[c].append(r.dimensions[c])
        # Unfiltered per-column indices: value -> distinct member count / row count.
        self._distinct_index: dict[str, dict[str, int]] = {}
        self._raw_index: dict[str, dict[str, int]] = {}
        for c in self._columns:
            seen: dict[str, set[str]] = {}
            raw: dict[str, int] = {}
            col = self._columns[c]
            for i, v in enumerate(col):
                seen.setdefault(v, set()).add(self._members[i])
                raw[v] = raw.get(v, 0) + 1
            self._distinct_index[c] = {v: len(s) for v, s in seen.items()}
            self._raw_index[c] = raw

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> tuple[EventRecord, ...]:
        return self._records

    def _require_column(self, column: str) -> None:
        if column not in self._columns and column not in self.schema.columns:
            raise QueryError(f"unknown column {column!r}")

    def domain_size(self, column: str) -> int | None:
        """Declared domain cardinality, or None when the domain is unknown."""
        self._require_column(column)
        meta = self.schema.meta(column)
        if meta is None or meta.domain is None:
            return None
        return len(meta.domain)

    def domain_values(self, column: str) -> tuple[str, ...] | None:
        self._require_column(column)
        meta = self.schema.meta(column)
        return None if meta is None or meta.domain is None else meta.domain

    def _matching_rows(
        self, terms: tuple[tuple[str, tuple[str, ...]], ...]
    ) -> Iterable[int]:
        for column, _ in terms:
            self._require_column(column)
        idx = range(len(self._records))
        for column, values in terms:
            col = self._columns.get(column)
            if col is None:
                return []
            allowed = set(values)
            idx = [i for i in idx if col[i] in allowed]
        return idx

    def group_counts(
        self,
        group_by: str,
        filter_spec: Mapping[str, object] | None = None,
        aggregation: str = "distinct",
    ) -> dict[str, int]:
        """Exact counts per group value (only values present in the data)."""
        self._require_column(group_by)
        if aggregation not in ("distinct", "raw"):
            raise QueryError(f"unknown aggregation {aggregation!r}")
        terms = normalize_filter(filter_spec)
        col = self._columns.get(group_by)
        if col is None:
            return {}
        if not terms:
            index = self._distinct_index if aggregation == "distinct" else self._raw_index
            return dict(index[group_by])
        rows = self._matching_rows(terms)
        if aggregation == "raw":
            out: dict[str, int] = {}
            for i in rows:
                v = col[i]
                out[v] = out.get(v, 0) + 1
            return out
        seen: dict[str, set[str]] = {}
        for i in rows:
            seen.setdefault(col[i], set()).add(self._members[i])
        return {v: len(s) for v, s in seen.items()}

    def top_counts(
        self,
        group_by: str,
        filter_spec: Mapping[str, object] | None = None,
        limit: int = 100,
        aggregation: str = "distinct",
    ) -> HistogramSlice:
        """Top ``limit`` exact counts, deterministically ordered."""
        if limit < 1:
            raise QueryError(f"limit must be >= 1, got {limit}")
        counts = self.group_counts(group_by, filter_spec, aggregation)
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return HistogramSlice(
            entries=tuple(ordered[:limit]), truncated_at=limit, aggregation=aggregation
        )


def _validate_records(
    records: Sequence[EventRecord], schema: Schema, as_of: date
) -> tuple[list[EventRecord], int, list[tuple[int, str]]]:
    dims = set(schema.dimension_columns())
    window_start = as_of - timedelta(days=schema.retention_days)
    kept: list[EventRecord] = []
    rejected = 0
    bad: list[tuple[int, str]] = []
    for i, r in enumerate(records):
        if not r.member_id:
            bad.append((i, "empty member_id"))
            continue
        if not isinstance(r.event_date, date):
            bad.append((i, "event_date is not a date"))
            continue
        have = set(r.dimensions)
        if have != dims:
            missing = sorted(dims - have)
            extra = sorted(have - dims)
            bad.append((i, f"dimension mismatch (missing={missing}, extra={extra})"))
            continue
        if not (window_start <= r.event_date <= as_of):
            rejected += 1
            continue
        kept.append(r)
    return kept, rejected, bad


def ingest(records: Sequence[EventRecord], schema: Schema, as_of: date) -> Table:
    """Build an immutable table snapshot from raw events.

    Schema-invalid rows raise :class:`IngestError` listing the offenders;
    rows outside the retention window are silently dropped and counted on
    the returned table.
    """
    kept, rejected, bad = _validate_records(records, schema, as_of)
    if bad:
        raise IngestError(bad)
    return Table(kept, schema, as_of, rejected_out_of_window=rejected)


def _record_from_flat(row: Mapping[str, str], index: int) -> EventRecord:
    missing = [f for f in RESERVED_FIELDS if f not in row]
    if missing:
        raise IngestError([(index, f"missing fields {missing}")])
    try:
        when = date.fromisoformat(str(row["event_date"]))
    except ValueError:
        raise IngestError([(index, f"bad event_date {row['event_date']!r}")]) from None
    dims = {k: str(v) for k, v in row.items() if k not in RESERVED_FIELDS}
    return EventRecord(
        member_id=str(row["member_id"]),
        item=str(row["item"]),
        event_date=when,
        dimensions=dims,
    )


def load_ndjson(path: str | Path) -> list[EventRecord]:
    """Newline-delimited JSON, one flat object per event (see docs/formats.md)."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError([(i, f"invalid JSON: {exc}")]) from None
            out.append(_record_from_flat(row, i))
    return out


def load_csv(path: str | Path) -> list[EventRecord]:
    """CSV with a header row naming member_id, item, event_date and dimensions."""
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            out.append(_record_from_flat(row, i))
    return out


SNAPSHOT_MANIFEST = "manifest.json"
SNAPSHOT_ROWS = "rows.ndjson"


def save_snapshot(table: Table, directory: str | Path) -> Path:
    """Persist an ingested table as a snapshot directory.

    The snapshot holds a manifest (schema, snapshot date, counts) and the
    validated rows re-serialized as canonical NDJSON; loading it back
    reproduces the table exactly.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": 1,
        "as_of": table.as_of.isoformat(),
        "schema": table.schema.to_dict(),
        "row_count": len(table),
        "rejected_out_of_window": table.rejected_out_of_window,
    }
    (directory / SNAPSHOT_MANIFEST).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    with open(directory / SNAPSHOT_ROWS, "w", encoding="utf-8") as fh:
        for r in table.records:
            row = {
                "member_id": r.member_id,
                "item": r.item,
                "event_date": r.event_date.isoformat(),
                **{k: r.dimensions[k] for k in sorted(r.dimensions)},
            }
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    return directory


def load_snapshot(directory: str | Path) -> Table:
    directory = Path(directory)
    manifest = json.loads((directory / SNAPSHOT_MANIFEST).read_text())
    if manifest.get("version") != 1:
        raise IngestError([(0, f"unsupported snapshot version {manifest.get('version')}")])
    schema = Schema.from_dict(manifest["schema"])
    as_of = date.fromisoformat(manifest["as_of"])
    records = load_ndjson(directory / SNAPSHOT_ROWS)
    return Table(
        records,
        schema,
        as_of,
        rejected_out_of_window=int(manifest.get("rejected_out_of_window", 0)),
    )
