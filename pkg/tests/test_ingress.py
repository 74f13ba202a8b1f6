"""Tests for the DC1 coding queues."""

import numpy as np
import pytest
from conftest import ManualScheduler

from src import codec
from src.errors import DuplicateFlowError, UnknownFlowError
from src.ingress import IngressDC
from src.models import CodingParams
from src.packets import CodingScope, Packet, PacketKind

MS = 1000


def data(flow, seq, t, payload=None):
    return Packet(PacketKind.DATA, flow, seq, payload or f"{flow}{seq}".encode(), sent_at=t)


def make_ingress(scheduler, params, flows, events=None):
    emitted = []

    def schedule_timer(queue_id, deadline):
        scheduler(deadline, lambda: emitted.extend(ingress.on_queue_timer(queue_id, deadline)))

    ingress = IngressDC("dc1", params, schedule_timer=schedule_timer, events=events)
    for flow in flows:
        ingress.assign_flow(flow, "dc2")
    return ingress, emitted


def feed(scheduler, ingress, emitted, arrivals):
    for flow, seq, t in arrivals:
        scheduler(t, lambda f=flow, s=seq, t=t: emitted.extend(ingress.dc1_process(data(f, s, t), f, t)))


def journal_of(ingress):
    return [(e.time // MS, e.action, {f"{f}{s}" for f, s in e.coverage}) for e in ingress.journal]


def test_queue_fill_skip_evict_and_timer_flush(scheduler):
    """Three flows, two queues, k=3: the hand-stepped emission sequence."""
    params = CodingParams(k=3, m_cross=2, queues_per_group=2, queue_timeout_ms=25)
    ingress, emitted = make_ingress(scheduler, params, ["A", "B", "C"])
    trace = [("A", 1, 0), ("B", 1, 1), ("A", 2, 2), ("C", 1, 3), ("A", 3, 4), ("A", 4, 5),
             ("B", 2, 6), ("B", 3, 7), ("B", 4, 8), ("C", 2, 10), ("C", 3, 30), ("A", 5, 31)]
    feed(scheduler, ingress, emitted, [(f, s, t * MS) for f, s, t in trace])
    scheduler.run_until(100 * MS)

    assert journal_of(ingress) == [
        (3, "emit", {"A1", "B1", "C1"}),
        (5, "evict", {"A2"}),
        (8, "emit", {"A4", "B2"}),
        (29, "emit", {"A3", "B3"}),
        (33, "emit", {"B4", "C2"}),
        (55, "emit", {"C3", "A5"}),
    ]
    assert len(emitted) == 5 * params.m_cross
    assert all(p.kind == PacketKind.CODED and p.dst == "dc2" for p in emitted)


class ReferenceCoder:
    """Direct transcription of the per-packet queueing procedure, one subgroup."""

    def __init__(self, flows, k, queues, timeout, schedule):
        self.k = k
        self.timeout = timeout
        self.schedule = schedule
        self.queues = [dict() for _ in range(queues)]
        self.deadline = [None] * queues
        self.rr = {f: 0 for f in flows}
        self.journal = []

    def next_rr(self, flow):
        index = self.rr[flow]
        self.rr[flow] = (index + 1) % len(self.queues)
        return index

    def arrive(self, flow, seq, now):
        q = self.next_rr(flow)
        initial = q
        while flow in self.queues[q]:
            q = self.next_rr(flow)
            if q == initial:
                if len(self.queues[q]) > 1:
                    self.close(q, now, "emit")
                else:
                    self.close(q, now, "evict")
                break
        if not self.queues[q]:
            deadline = now + self.timeout
            self.deadline[q] = deadline
            self.schedule(deadline, lambda: self.timer(q, deadline))
        self.queues[q][flow] = seq
        if len(self.queues[q]) == self.k:
            self.close(q, now, "emit")

    def timer(self, q, deadline):
        if self.deadline[q] != deadline or not self.queues[q]:
            return
        self.close(q, deadline, "discard" if len(self.queues[q]) == 1 else "emit")

    def close(self, q, now, action):
        self.journal.append((now, action, tuple(self.queues[q].items())))
        self.queues[q] = {}
        self.deadline[q] = None


@pytest.mark.parametrize("seed", range(20))
def test_matches_reference_on_random_traces(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 6))
    flows = [f"f{i}" for i in range(int(rng.integers(2, k + 1)))]
    queues = int(rng.integers(1, 4))
    params = CodingParams(k=k, m_cross=1, queues_per_group=queues, queue_timeout_ms=25)

    clock_a, clock_b = ManualScheduler(), ManualScheduler()
    ingress, emitted = make_ingress(clock_a, params, flows)
    reference = ReferenceCoder(flows, k, queues, params.queue_timeout_us, clock_b)

    seqs = {f: 0 for f in flows}
    t = 0
    arrivals = []
    for _ in range(300):
        t += int(rng.integers(0, 15 * MS))
        flow = flows[int(rng.integers(len(flows)))]
        arrivals.append((flow, seqs[flow], t))
        seqs[flow] += 1
    feed(clock_a, ingress, emitted, arrivals)
    for flow, seq, at in arrivals:
        clock_b(at, lambda f=flow, s=seq, at=at: reference.arrive(f, s, at))
    clock_a.run_until(t + 100 * MS)
    clock_b.run_until(t + 100 * MS)

    ours = [(e.time, e.action, e.coverage) for e in ingress.journal]
    assert ours == reference.journal


def test_cross_batch_decodes_back(scheduler):
    params = CodingParams(k=3, m_cross=2)
    ingress, emitted = make_ingress(scheduler, params, ["a", "b", "c"])
    payloads = {"a": b"alpha", "b": b"bravo-longer", "c": b"c"}
    for flow, payload in payloads.items():
        emitted += ingress.dc1_process(data(flow, 0, 0, payload), flow, 0)

    assert len(emitted) == 2
    meta = emitted[0].coded
    assert meta.scope == CodingScope.CROSS and meta.k_effective == 3 and meta.m == 2
    symbol_len = max(ref.symbol_len for ref in meta.coverage)
    present = {meta.position_of("a", 0): payloads["a"].ljust(symbol_len, b"\x00")}
    for pkt in emitted:
        present[meta.k_effective + pkt.coded.index] = pkt.payload
    decoded = codec.decode(codec.SymbolBlock.from_present(3, 2, present, symbol_len))
    for flow in ("b", "c"):
        ref = meta.coverage[meta.position_of(flow, 0)]
        assert codec.trim(decoded[meta.position_of(flow, 0)], ref.symbol_len) == payloads[flow]


def test_in_stream_block_and_timer_flush(scheduler):
    params = CodingParams(k=2, m_cross=1, s=0.2, cross_enabled=False)
    ingress, emitted = make_ingress(scheduler, params, ["a"])
    assert params.in_stream_geometry == (5, 1)
    feed(scheduler, ingress, emitted, [("a", seq, seq * 10 * MS) for seq in range(8)])
    scheduler.run_until(500 * MS)

    assert [p.coded.k_effective for p in emitted] == [5, 3]
    assert all(p.coded.scope == CodingScope.IN_STREAM and p.flow_id == "a" for p in emitted)
    # the second block closed on its timer, 125 ms after seq 5 arrived
    assert params.in_stream_timeout_us == 125 * MS
    assert emitted[1].sent_at == 50 * MS + params.in_stream_timeout_us


def test_lone_packet_is_discarded_on_timeout(scheduler, events):
    params = CodingParams(k=3, m_cross=1)
    ingress, emitted = make_ingress(scheduler, params, ["a", "b"], events=events)
    feed(scheduler, ingress, emitted, [("a", 0, 0)])
    scheduler.run_until(100 * MS)
    assert emitted == []
    assert journal_of(ingress) == [(25, "discard", {"a0"})]
    assert [r.event for r in events.select("discard")] == ["discard"]


def test_subgroups_hold_at_most_k_flows():
    ingress = IngressDC("dc1", CodingParams(k=2, m_cross=1))
    placed = [ingress.assign_flow(f"f{i}", "dc2") for i in range(5)]
    assert [index for _, index in placed] == [0, 0, 1, 1, 2]
    assert ingress.groups["dc2"].subgroups == [["f0", "f1"], ["f2", "f3"], ["f4"]]


def test_flow_registration_errors():
    ingress = IngressDC("dc1", CodingParams(k=2, m_cross=1))
    ingress.assign_flow("a", "dc2")
    with pytest.raises(DuplicateFlowError):
        ingress.assign_flow("a", "dc3")
    with pytest.raises(UnknownFlowError):
        ingress.dc1_process(data("zz", 0, 0), "zz", 0)
