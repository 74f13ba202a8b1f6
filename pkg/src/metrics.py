"""Metrics computed from a simulation's event log, plus the FEC what-if."""

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd

from .errors import TraceError
from .events import EventLog
from .models import CbrPattern, FlowMetrics, MetricsReport, ms_to_us

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["path", "service", "metric", "value"]
TRACE_COLUMNS = ["flow_id", "seq", "received"]
EPISODE_BUCKETS = ("Random", "MultiPacket", "Outage")
RATIO_QUANTILES = {"p50": 0.5, "p90": 0.9, "p99": 0.99}
DEFAULT_LEVELS = (1, 2, 5)
FEC_BURST = 5

RECOVERY_VIAS = frozenset({"cache", "cross", "in_stream"})


# ---------------------------------------------------------------------------
# loss episodes

def bucket_of(length: int) -> str:
    if length <= 1:
        return "Random"
    if length <= 14:
        return "MultiPacket"
    return "Outage"


def episode_runs(dropped: Iterable[int]) -> List[List[int]]:
    """Split dropped sequence numbers into runs of consecutive seqs."""
    runs: List[List[int]] = []
    for seq in sorted(set(dropped)):
        if runs and seq == runs[-1][-1] + 1:
            runs[-1].append(seq)
        else:
            runs.append([seq])
    return runs


@dataclass
class EpisodeHistogram:
    counts: Dict[str, int] = field(default_factory=dict)
    losses: Dict[str, int] = field(default_factory=dict)
    runs: Dict[str, List[List[int]]] = field(default_factory=dict)

    def add(self, flow_id: str, run: List[int]) -> None:
        bucket = bucket_of(len(run))
        self.counts[bucket] = self.counts.get(bucket, 0) + 1
        self.losses[bucket] = self.losses.get(bucket, 0) + len(run)
        self.runs.setdefault(flow_id, []).append(run)


def direct_paths(events: EventLog) -> Dict[str, Tuple[str, str]]:
    """flow -> (source, destination), read off the send events."""
    paths = {}
    for rec in events.select("send"):
        paths.setdefault(rec.flow, (rec.node, rec.peer))
    return paths


def direct_drops(events: EventLog, paths: Optional[Dict[str, Tuple[str, str]]] = None) -> Dict[str, Set[int]]:
    paths = paths if paths is not None else direct_paths(events)
    drops: Dict[str, Set[int]] = defaultdict(set)
    for rec in events.select("drop"):
        if rec.kind == "data" and paths.get(rec.flow) == (rec.node, rec.peer):
            drops[rec.flow].add(rec.seq)
    return drops


def classify_episodes(events: EventLog,
                      paths: Optional[Dict[str, Tuple[str, str]]] = None) -> EpisodeHistogram:
    """Histogram of direct-path loss episodes across all flows."""
    histogram = EpisodeHistogram()
    for flow_id, seqs in sorted(direct_drops(events, paths).items()):
        for run in episode_runs(seqs):
            histogram.add(flow_id, run)
    return histogram


# ---------------------------------------------------------------------------
# FEC what-if

@dataclass
class WhatIfResult:
    rates: Dict[str, float]
    blocks: int
    lost: int
    coding_rate: Optional[float] = None

    @property
    def delta_pp(self) -> Dict[str, float]:
        """Percentage-point gain of the coding run over each FEC level."""
        if self.coding_rate is None:
            return {}
        return {level: (self.coding_rate - rate) * 100 for level, rate in self.rates.items()}

    def to_dict(self) -> dict:
        out = {"rates": self.rates, "blocks": self.blocks, "lost": self.lost}
        if self.coding_rate is not None:
            out["coding_rate"] = self.coding_rate
            out["delta_pp"] = self.delta_pp
        return out


def level_label(parities: int) -> str:
    return f"{parities}/{FEC_BURST}"


def fec_whatif(trace: pd.DataFrame, levels: Sequence[int] = DEFAULT_LEVELS,
               coding_rate: Optional[float] = None) -> WhatIfResult:
    """Recovery rate of on-path FEC replayed over a direct-path trace.

    Each flow's packets are cut into 5-packet bursts taken in pairs: the first
    burst is data, the first ``p`` packets of the second act as its parities
    at level ``p/5``. A block recovers when its data losses do not exceed the
    parities that survived.
    """
    missing = [c for c in TRACE_COLUMNS if c not in trace.columns]
    if missing:
        raise TraceError(f"trace is missing columns: {', '.join(missing)}")
    for p in levels:
        if not 1 <= p <= FEC_BURST:
            raise TraceError(f"overhead level must be 1..{FEC_BURST} parities, got {p}")

    recovered = {p: 0 for p in levels}
    lost = 0
    blocks = 0
    for _, flow in trace.sort_values(["flow_id", "seq"]).groupby("flow_id", sort=True):
        received = flow["received"].astype(bool).to_numpy()
        usable = len(received) // (2 * FEC_BURST) * (2 * FEC_BURST)
        for start in range(0, usable, 2 * FEC_BURST):
            data = received[start:start + FEC_BURST]
            fec = received[start + FEC_BURST:start + 2 * FEC_BURST]
            blocks += 1
            data_losses = int((~data).sum())
            if data_losses == 0:
                continue
            lost += data_losses
            for p in levels:
                if data_losses <= int(fec[:p].sum()):
                    recovered[p] += data_losses
    if blocks == 0:
        raise TraceError(f"trace too short: no flow has {2 * FEC_BURST} packets")
    rates = {level_label(p): (recovered[p] / lost if lost else 1.0) for p in levels}
    logger.info(f"FEC what-if over {blocks} blocks, {lost} lost: "
                + ", ".join(f"{k}={v:.1%}" for k, v in rates.items()))
    return WhatIfResult(rates=rates, blocks=blocks, lost=lost, coding_rate=coding_rate)


def load_trace(path: Union[str, Path]) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise TraceError(f"cannot read trace {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# report

@dataclass
class _SeqRecord:
    sent_at: int
    direct: bool
    overlay: bool
    forwarding: bool
    direct_dropped: bool = False
    overlay_dropped: bool = False
    first_via: Optional[str] = None
    first_at: Optional[int] = None
    detected_at: Optional[int] = None
    nacked: bool = False

    @property
    def lost_by_drops(self) -> bool:
        direct_ok = self.direct and not self.direct_dropped
        overlay_ok = self.forwarding and self.overlay and not self.overlay_dropped
        return not (direct_ok or overlay_ok)


def _collect(result) -> Dict[str, Dict[int, _SeqRecord]]:
    seqs: Dict[str, Dict[int, _SeqRecord]] = defaultdict(dict)
    paths = {fid: (p.config.source, p.config.destination) for fid, p in result.plans.items()}
    for rec in result.events:
        if rec.event == "send":
            d = rec.detail
            seqs[rec.flow][rec.seq] = _SeqRecord(rec.time, d["direct"], d["overlay"],
                                                 d["service"] == "forwarding")
        elif rec.event == "drop" and rec.kind == "data":
            entry = seqs.get(rec.flow, {}).get(rec.seq)
            if entry is None:
                continue
            if paths.get(rec.flow) == (rec.node, rec.peer):
                entry.direct_dropped = True
            elif entry.forwarding:
                entry.overlay_dropped = True
        elif rec.event == "nack":
            for seq in rec.detail["seqs"]:
                entry = seqs.get(rec.flow, {}).get(seq)
                if entry is not None and not entry.nacked:
                    entry.nacked = True
                    entry.detected_at = rec.time
        elif rec.event == "deliver":
            entry = seqs.get(rec.flow, {}).get(rec.seq)
            if entry is not None and entry.first_via is None:
                entry.first_via = rec.detail["via"]
                entry.first_at = rec.time
    return seqs


def _flow_metrics(path: str, service: str, records: Dict[int, _SeqRecord], rtt: int, y: int,
                  access_drops: int) -> Tuple[FlowMetrics, List[float]]:
    m = FlowMetrics(path=path, service=service, sent=len(records), access_drops=access_drops)
    ratios: List[float] = []
    for entry in records.values():
        if entry.nacked:
            m.nacks += 1
            if not entry.lost_by_drops:
                m.spurious_nacks += 1
        if entry.first_via == "direct":
            m.delivered_direct += 1
        elif entry.first_via == "overlay":
            m.delivered_overlay += 1
        elif entry.first_via in RECOVERY_VIAS:
            detected = entry.detected_at if entry.detected_at is not None else entry.sent_at + y
            elapsed = entry.first_at - detected
            ratios.append(elapsed / rtt)
            if elapsed <= rtt:
                m.recovered += 1
            else:
                m.unrecovered += 1
        elif entry.lost_by_drops:
            m.unrecovered += 1
        else:
            m.in_flight += 1
    _finish(m, ratios)
    return m, ratios


def _finish(m: FlowMetrics, ratios: List[float]) -> None:
    m.lost = m.recovered + m.unrecovered
    m.loss_rate = m.lost / m.sent if m.sent else 0.0
    if m.lost:
        m.recovered_fraction = m.recovered / m.lost
        m.unrecovered_fraction = m.unrecovered / m.lost
    if ratios:
        values = np.array(ratios, dtype=float)
        m.recovery_rtt_quantiles = {k: float(np.quantile(values, q)) for k, q in RATIO_QUANTILES.items()}
        m.recovery_rtt_quantiles["max"] = float(values.max())


def _seq_complete(records: Dict[int, _SeqRecord]) -> Optional[float]:
    if not records or any(r.first_at is None for r in records.values()):
        return None
    start = min(r.sent_at for r in records.values())
    return (max(r.first_at for r in records.values()) - start) / 1000


def build_report(result) -> MetricsReport:
    """Assemble the MetricsReport of a finished simulation."""
    config = result.config
    dcs = set(config.topology.dcs)
    seqs = _collect(result)

    access: Dict[str, int] = defaultdict(int)
    for rec in result.events.select("drop"):
        if (rec.node in dcs) != (rec.peer in dcs) and rec.flow:
            access[rec.flow] += 1

    flows: Dict[str, FlowMetrics] = {}
    all_ratios: List[float] = []
    for flow in config.flows:
        plan = result.plans[flow.flow_id]
        service = result.registry.lookup(flow.flow_id).service.value
        records = seqs.get(flow.flow_id, {})
        metrics, ratios = _flow_metrics(flow.flow_id, service, records, plan.rtt,
                                        ms_to_us(plan.latencies.y), access[flow.flow_id])
        if isinstance(flow.pattern, CbrPattern) and flow.pattern.count is not None:
            metrics.seq_complete_ms = _seq_complete(records)
        flows[flow.flow_id] = metrics
        all_ratios += ratios

    aggregate = FlowMetrics(path="all", service="all")
    for m in flows.values():
        for name in ("sent", "delivered_direct", "delivered_overlay", "recovered", "unrecovered",
                     "in_flight", "nacks", "spurious_nacks", "access_drops"):
            setattr(aggregate, name, getattr(aggregate, name) + getattr(m, name))
    _finish(aggregate, all_ratios)

    paths = {fid: (p.config.source, p.config.destination) for fid, p in result.plans.items()}
    episodes = classify_episodes(result.events, paths)

    bytes_per_link = {link.name: link.bytes for link in result.network.links.values() if link.bytes}
    cost: Dict[str, float] = defaultdict(float)
    for link in result.network.links.values():
        if link.src not in dcs:
            continue
        price = config.cost.price_for(link.src)
        for service, n in link.bytes_by_service.items():
            cost[service] += n / 1e9 * price

    coded: Dict[str, int] = defaultdict(int)
    for rec in result.events.select("coded_emit"):
        coded[rec.kind] += rec.detail["m"]
    coding_flows = [m for m in flows.values() if m.service == "coding"]
    coding_sent = sum(m.sent for m in coding_flows)
    overhead = {scope: n / coding_sent for scope, n in coded.items()} if coding_sent else {}
    coding_lost = sum(m.lost for m in coding_flows)

    failures: Dict[str, int] = defaultdict(int)
    for dc in result.dcs.values():
        for reason, n in dc.egress.failures.items():
            failures[reason] += n

    return MetricsReport(
        scenario=config.name,
        seed=result.seed,
        flows=flows,
        aggregate=aggregate,
        episodes=episodes.counts,
        episode_losses=episodes.losses,
        bytes_per_link=bytes_per_link,
        cost_per_service=dict(cost),
        coded_overhead=overhead,
        failures=dict(failures),
        coding_recovery_rate=(sum(m.recovered for m in coding_flows) / coding_lost) if coding_lost else None,
    )


def direct_trace(result) -> pd.DataFrame:
    """flow_id, seq, received for every packet sent on a direct path."""
    seqs = _collect(result)
    rows = [
        (flow_id, seq, not entry.direct_dropped)
        for flow_id in sorted(seqs)
        for seq, entry in sorted(seqs[flow_id].items())
        if entry.direct
    ]
    return pd.DataFrame(rows, columns=TRACE_COLUMNS)


# ---------------------------------------------------------------------------
# output

_FLOW_FIELDS = ("sent", "delivered_direct", "delivered_overlay", "recovered", "unrecovered", "in_flight",
                "lost", "loss_rate", "recovered_fraction", "unrecovered_fraction", "nacks",
                "spurious_nacks", "access_drops", "seq_complete_ms")


def _flow_rows(m: FlowMetrics) -> List[Tuple[str, str, str, float]]:
    rows = [(m.path, m.service, name, getattr(m, name)) for name in _FLOW_FIELDS
            if getattr(m, name) is not None]
    rows += [(m.path, m.service, f"recovery_rtt_{q}", v) for q, v in m.recovery_rtt_quantiles.items()]
    return rows


def report_rows(report: MetricsReport) -> pd.DataFrame:
    """Long-format metrics table with the frozen (path, service, metric, value) columns."""
    rows = []
    for m in report.flows.values():
        rows += _flow_rows(m)
    rows += _flow_rows(report.aggregate)
    for bucket in EPISODE_BUCKETS:
        rows.append(("all", "all", f"episodes_{bucket}", report.episodes.get(bucket, 0)))
        rows.append(("all", "all", f"episode_losses_{bucket}", report.episode_losses.get(bucket, 0)))
    rows += [(link, "all", "bytes", n) for link, n in report.bytes_per_link.items()]
    rows += [("all", service, "cost_usd", v) for service, v in report.cost_per_service.items()]
    rows += [("all", "coding", f"coded_overhead_{scope}", v) for scope, v in report.coded_overhead.items()]
    rows += [("all", "coding", f"failures_{reason}", n) for reason, n in report.failures.items()]
    if report.coding_recovery_rate is not None:
        rows.append(("all", "coding", "recovery_rate", report.coding_recovery_rate))
    frame = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    frame["value"] = frame["value"].astype(float)
    return frame.sort_values(["path", "service", "metric"], kind="mergesort").reset_index(drop=True)


def write_artifacts(report: MetricsReport, result, out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_rows(report).to_csv(out / "metrics.csv", index=False)
    (out / "summary.json").write_text(json.dumps(report.model_dump(mode="json"), sort_keys=True, indent=2))
    result.events.to_csv(out / "events.csv")
    direct_trace(result).to_csv(out / "direct_trace.csv", index=False)
    logger.info(f"💾 results written to {out}")
    return out
