"""Brute-force recoverability replay over a full event log.

The replay runs neither the DC nor the receiver state machines. It indexes
what physically arrived where, and when, then applies the MDS condition to
every NACK and every in-stream block on its own:

- cache: the NACKed packet reached its egress DC, and the later of the two
  arrivals falls inside the NACK deadline and the cache ttl.
- cross-stream batch: the coded packets plus distinct helper responses that
  reached the egress DC before the NACK deadline, with the batch still inside
  its ttl, number at least k.
- in-stream block: at some arrival before the parity deadline, the block
  packets the receiver still holds plus the parities it received number at
  least k; every block packet missing at that moment counts as recovered.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Set, Tuple

from .events import EventLog, EventRecord
from .models import ScenarioConfig
from .scenario import dc_ttls, plan_flows

logger = logging.getLogger(__name__)

Key = Tuple[str, int]


@dataclass
class _Batch:
    k: int
    cover: Tuple[Key, ...]
    stored_at: int
    # symbol identity -> first arrival: ("coded", index) or a covered key
    symbols: Dict[object, int] = field(default_factory=dict)

    def symbols_by(self, t: int) -> int:
        return sum(1 for at in self.symbols.values() if at <= t)


@dataclass
class _Nack:
    key: Key
    arrived: int
    deadline: int


@dataclass
class _DcView:
    ttl: int
    cache: Dict[Key, int] = field(default_factory=dict)
    batches: Dict[str, _Batch] = field(default_factory=dict)
    batch_of: Dict[Key, str] = field(default_factory=dict)
    nacks: List[_Nack] = field(default_factory=list)


@dataclass
class _Block:
    k: int
    cover: Tuple[int, ...]
    # index -> (arrival, deadline)
    parities: Dict[int, Tuple[int, int]] = field(default_factory=dict)


@dataclass
class _ReceiverView:
    retention: int
    budget: int
    arrivals: Dict[int, int] = field(default_factory=dict)
    blocks: Dict[str, _Block] = field(default_factory=dict)


@dataclass
class OracleResult:
    expected: Set[Key]
    reported: Set[Key]

    @property
    def matches(self) -> bool:
        return self.expected == self.reported

    @property
    def missing(self) -> Set[Key]:
        """Recoverable per the replay but not recovered by the system."""
        return self.expected - self.reported

    @property
    def extra(self) -> Set[Key]:
        return self.reported - self.expected


def reported_recoveries(events: EventLog) -> Set[Key]:
    """(flow, seq) the system claims: DC recovery sends plus receiver in-stream decodes."""
    keys = {(r.flow, r.seq) for r in events.select("recovery_sent")}
    keys |= {(r.flow, r.seq) for r in events.select("deliver") if r.detail.get("via") == "in_stream"}
    return keys


class RecoveryOracle:
    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.plans = plan_flows(config)
        self.dcs = {dc: _DcView(ttl) for dc, ttl in dc_ttls(config, self.plans).items()}
        self.receivers = {fid: _ReceiverView(p.retention, p.recovery_budget) for fid, p in self.plans.items()}

    def replay(self, events: EventLog) -> OracleResult:
        if not events.full:
            raise ValueError("recoverability replay needs an event log recorded at full detail")
        for rec in events.select("arrive"):
            if rec.node in self.dcs:
                self._index_dc(self.dcs[rec.node], rec)
            elif rec.flow in self.receivers and self.plans[rec.flow].config.destination == rec.node:
                self._index_receiver(self.receivers[rec.flow], rec)

        expected: Set[Key] = set()
        for view in self.dcs.values():
            expected |= {n.key for n in view.nacks if cache_hit(view, n) or cross_decodable(view, n)}
        for flow, view in self.receivers.items():
            for block in view.blocks.values():
                expected |= {(flow, seq) for seq in in_stream_recovered(view, block)}

        result = OracleResult(expected=expected, reported=reported_recoveries(events))
        if not result.matches:
            logger.warning(f"⚠️ oracle mismatch: {len(result.missing)} missing, {len(result.extra)} extra")
        return result

    def _index_dc(self, view: _DcView, rec: EventRecord) -> None:
        now, d = rec.time, rec.detail
        if rec.kind == "data":
            plan = self.plans.get(rec.flow)
            if plan and d.get("service") == "caching" and rec.node == plan.egress_dc:
                view.cache.setdefault((rec.flow, rec.seq), now)
        elif rec.kind == "coded" and d["scope"] == "cross":
            cover = tuple((f, s) for f, s in d["cover"])
            batch = view.batches.setdefault(d["batch"], _Batch(d["k"], cover, now))
            if batch.cover != cover:
                return
            batch.symbols.setdefault(("coded", d["index"]), now)
            for key in cover:
                view.batch_of.setdefault(key, d["batch"])
        elif rec.kind == "coop_response":
            batch = view.batches.get(d.get("batch") or "")
            key = (rec.flow, rec.seq)
            if batch is not None and key in batch.cover:
                batch.symbols.setdefault(key, now)
        elif rec.kind == "nack":
            deadline = max(now + 1, d["deadline"] if d.get("deadline") is not None else now + 1)
            view.nacks += [_Nack((rec.flow, seq), now, deadline) for seq in d["seqs"]]

    @staticmethod
    def _index_receiver(view: _ReceiverView, rec: EventRecord) -> None:
        now, d = rec.time, rec.detail
        if rec.kind in ("data", "recovered"):
            view.arrivals.setdefault(rec.seq, now)
        elif rec.kind == "coded" and d.get("scope") == "in_stream":
            block = view.blocks.setdefault(d["batch"], _Block(d["k"], tuple(s for _, s in d["cover"])))
            deadline = d["deadline"] if d.get("deadline") is not None else now + view.budget
            block.parities.setdefault(d["index"], (now, deadline))


def cache_hit(view: _DcView, nack: _Nack) -> bool:
    cached_at = view.cache.get(nack.key)
    if cached_at is None:
        return False
    served_at = max(nack.arrived, cached_at)
    return served_at <= nack.deadline and served_at - cached_at <= view.ttl


def cross_decodable(view: _DcView, nack: _Nack) -> bool:
    batch = view.batches.get(view.batch_of.get(nack.key, ""))
    if batch is None:
        return False
    until = min(nack.deadline, batch.stored_at + view.ttl)
    if max(nack.arrived, batch.stored_at) > until:
        return False
    return batch.symbols_by(until) >= batch.k


def in_stream_recovered(view: _ReceiverView, block: _Block) -> List[int]:
    """Block seqs the receiver could rebuild, judged at every arrival that may complete the block."""
    if not block.parities:
        return []
    first = min(at for at, _ in block.parities.values())
    moments: Iterable[int] = sorted(
        {at for at, _ in block.parities.values()}
        | {at for seq in block.cover if (at := view.arrivals.get(seq)) is not None and at >= first}
    )
    for now in moments:
        parities = [deadline for at, deadline in block.parities.values() if at <= now]
        if now > max(parities):
            continue
        held = [seq for seq in block.cover if _held(view, seq, now)]
        if len(held) == len(block.cover):
            return []
        if len(held) + len(parities) >= block.k:
            return [seq for seq in block.cover if view.arrivals.get(seq, now + 1) > now]
    return []


def _held(view: _ReceiverView, seq: int, now: int) -> bool:
    at = view.arrivals.get(seq)
    return at is not None and at <= now and now - at <= view.retention


def check_recoverability(config: ScenarioConfig, events: EventLog) -> OracleResult:
    return RecoveryOracle(config).replay(events)
