from __future__ import annotations

import sys
from datetime import date
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dpquery.store import ColumnMeta, EventRecord, Schema, ingest

SECRET = bytes.fromhex(
    "8f3a1c5d9b2e4f60718293a4b5c6d7e8f90a1b2c3d4e5f60718293a4b5c6d7e8"
)
AS_OF = date(2020, 6, 30)


@pytest.fixture
def secret() -> bytes:
    return SECRET


def make_schema(**columns) -> Schema:
    metas = {}
    for name, spec in columns.items():
        metas[name] = ColumnMeta(
            name=name,
            domain=tuple(spec["domain"]) if "domain" in spec else None,
            delta_sensitivity=spec.get("delta"),
            tau=spec.get("tau", 1),
        )
    return Schema(columns=metas)


def make_records(rows, when: date = AS_OF) -> list[EventRecord]:
    """rows: (member_id, item, {dim: value}) triples."""
    return [
        EventRecord(member_id=m, item=i, event_date=when, dimensions=dims)
        for m, i, dims in rows
    ]


@pytest.fixture
def small_table():
    schema = make_schema(
        item={},
        title={"delta": 1},
        seniority={"domain": tuple(f"level{i}" for i in range(10))},
    )
    rows = []
    for m in range(40):
        member = f"m{m:03d}"
        rows.append((member, f"article{m % 7}", {
            "title": f"title{m % 5}",
            "seniority": f"level{m % 10}",
        }))
        if m % 3 == 0:
            rows.append((member, f"article{(m + 1) % 7}", {
                "title": f"title{m % 5}",
                "seniority": f"level{m % 10}",
            }))
    return ingest(make_records(rows), schema, AS_OF)
