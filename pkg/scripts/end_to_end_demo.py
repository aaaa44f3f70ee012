#!/usr/bin/env python3
"""End-to-end demo: synthesize events, serve them, spend a budget.

Builds a synthetic engagement table, stands up the query service over a
local socket, then plays an analyst who asks top-k queries until the
budget runs out.  Shows result consistency (same query, same answer) and
the admission/charging flow.
"""

from __future__ import annotations

import argparse
import json
import socket
from datetime import date

from dpquery.budget import BudgetLedger
from dpquery.config import FetchRule
from dpquery.mechanisms import PrivacyParams
from dpquery.service import QueryService, ServiceServer
from dpquery.store import ColumnMeta, EventRecord, Schema, ingest

AS_OF = date(2020, 6, 30)


def synthesize(n_members: int, n_items: int) -> list[EventRecord]:
    records = []
    for m in range(n_members):
        member = f"m{m:05d}"
        title = f"title{m % 15}"
        for i in range(n_items):
            if m < n_members - (n_members // n_items) * i:
                records.append(
                    EventRecord(member, f"item{i:03d}", AS_OF, {"title": title})
                )
    return records


def ask(address, payload) -> dict:
    with socket.create_connection(address) as sock:
        fh = sock.makefile("rwb")
        fh.write(json.dumps(payload).encode() + b"\n")
        fh.flush()
        return json.loads(fh.readline())


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--members", type=int, default=2000)
    parser.add_argument("--items", type=int, default=120)
    parser.add_argument("--k", type=int, default=10)
    parser.add_argument("--eps", type=float, default=0.15)
    parser.add_argument("--delta", type=float, default=1e-10)
    parser.add_argument("--info-budget", type=int, default=100)
    parser.add_argument("--call-budget", type=int, default=4)
    args = parser.parse_args()

    schema = Schema(columns={"item": ColumnMeta("item"), "title": ColumnMeta("title", delta_sensitivity=1)})
    table = ingest(synthesize(args.members, args.items), schema, AS_OF)
    print(f"ingested {len(table)} events over {args.members} members")

    service = QueryService(
        tables={"events": table},
        secret=bytes(range(32)),
        params=PrivacyParams(args.eps, args.delta),
        ledger=BudgetLedger(default_info=args.info_budget, default_calls=args.call_budget),
        fetch=FetchRule(k_multiplier=10, min_fetch=100),
    )
    server = ServiceServer(service).start()
    address = server.address
    print(f"service listening on {address[0]}:{address[1]}\n")

    query = {"op": "query", "analyst_id": "demo", "table": "events",
             "group_by": "item", "k": args.k}
    try:
        first = ask(address, query)
        again = ask(address, query)
        print(f"query 1: status={first['status']} entries={len(first['entries'])} "
              f"charge={first['cost_charged']}")
        print(f"query 2 (identical): entries match query 1: "
              f"{first['entries'] == again['entries']}\n")

        n = 2
        while True:
            reply = ask(address, query)
            n += 1
            if reply["status"] != "ok":
                print(f"query {n}: {reply['status']} ({reply['reason']}), "
                      f"remaining={reply['budget_remaining']}")
                break
            print(f"query {n}: ok, charge={reply['cost_charged']}, "
                  f"remaining={reply['budget_remaining']}")
        budget = ask(address, {"op": "get_budget", "analyst_id": "demo"})
        print(f"\nfinal ledger state: used={budget['used']} of max={budget['max']}")
    finally:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
