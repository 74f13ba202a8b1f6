"""Structured simulation event log."""

import json
from dataclasses import dataclass
from typing import Iterator, List, Optional

import pandas as pd

EVENT_COLUMNS = ["time", "event", "node", "flow", "seq", "kind", "peer", "detail"]

# Emitted only at the "full" detail level.
FULL_ONLY_EVENTS = frozenset({"transmit", "arrive", "duplicate"})


@dataclass(slots=True)
class EventRecord:
    time: int
    event: str
    node: str
    flow: str = ""
    seq: int = -1
    kind: str = ""
    peer: str = ""
    detail: Optional[dict] = None


class EventLog:
    """Append-only, time-ordered log of everything the simulation did."""

    def __init__(self, detail: str = "standard"):
        if detail not in ("standard", "full"):
            raise ValueError(f"unknown event detail level '{detail}'")
        self.level = detail
        self.records: List[EventRecord] = []

    @property
    def full(self) -> bool:
        return self.level == "full"

    def record(self, time: int, event: str, node: str, flow: str = "", seq: int = -1,
               kind: str = "", peer: str = "", detail: Optional[dict] = None) -> None:
        if event in FULL_ONLY_EVENTS and not self.full:
            return
        self.records.append(EventRecord(time, event, node, flow, seq, kind, peer, detail))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[EventRecord]:
        return iter(self.records)

    def select(self, *events: str) -> List[EventRecord]:
        wanted = set(events)
        return [r for r in self.records if r.event in wanted]

    def to_frame(self) -> pd.DataFrame:
        rows = [
            (r.time, r.event, r.node, r.flow, r.seq, r.kind, r.peer,
             json.dumps(r.detail, sort_keys=True) if r.detail is not None else "")
            for r in self.records
        ]
        return pd.DataFrame(rows, columns=EVENT_COLUMNS)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)
