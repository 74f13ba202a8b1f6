"""Tests for sender duplication, loss detection and receiver recovery paths."""

import numpy as np
import pytest

from src.endpoint import SEQ_MASK, DetectorMode, LossDetector, Receiver, ReplayBuffer, Sender
from src.errors import PolicyError, UnknownFlowError
from src.ingress import IngressDC
from src.models import CodingParams, DetectorConfig, DuplicationMode, DuplicationPolicy, ServiceKind
from src.packets import BURST_END, HANDSHAKE, Packet, PacketKind

MS = 1000
RTT = 160 * MS
BUDGET = 150 * MS


# ---------------------------------------------------------------------------
# sender

def hops(sender, flow, markers=frozenset()):
    pkt = sender.next_packet(flow, b"x", 0, markers)
    return sorted((t.next_hop, t.packet.overlay) for t in sender.send(pkt))


@pytest.mark.parametrize("service,policy,expected", [
    (ServiceKind.DIRECT, DuplicationPolicy(), [("r", False)]),
    (ServiceKind.CACHING, DuplicationPolicy(), [("dc1", False), ("r", False)]),
    (ServiceKind.CODING, DuplicationPolicy(), [("dc1", False), ("r", False)]),
    (ServiceKind.FORWARDING, DuplicationPolicy(), [("dc1", True)]),
    (ServiceKind.FORWARDING, DuplicationPolicy(duplicate_both=True), [("dc1", True), ("r", False)]),
    (ServiceKind.DIRECT, DuplicationPolicy(mode=DuplicationMode.NONE), [("r", False)]),
])
def test_sender_routes_by_service(service, policy, expected):
    sender = Sender("s")
    sender.add_flow("f", "r", "dc1", service, policy)
    assert hops(sender, "f") == expected


def test_selective_duplication_follows_markers():
    sender = Sender("s")
    policy = DuplicationPolicy(mode=DuplicationMode.SELECTIVE, markers=[HANDSHAKE])
    sender.add_flow("f", "r", "dc1", ServiceKind.CACHING, policy)
    assert hops(sender, "f") == [("r", False)]
    assert hops(sender, "f", {HANDSHAKE}) == [("dc1", False), ("r", False)]


def test_no_duplication_requires_direct_service():
    sender = Sender("s")
    with pytest.raises(PolicyError):
        sender.add_flow("f", "r", "dc1", ServiceKind.CACHING, DuplicationPolicy(mode=DuplicationMode.NONE))
    with pytest.raises(UnknownFlowError):
        sender.next_packet("missing", b"", 0)


def test_send_transmits_and_logs(events):
    sent = []
    sender = Sender("s", transmit=lambda hop, pkt, now: sent.append((hop, now)), events=events)
    sender.add_flow("f", "r", "dc1", ServiceKind.CACHING, DuplicationPolicy())
    sender.send(sender.next_packet("f", b"x", 5), now=5)
    assert sorted(sent) == [("dc1", 5), ("r", 5)]
    [record] = events.select("send")
    assert record.detail == {"service": "caching", "direct": True, "overlay": False}


def test_sequence_numbers_wrap():
    sender = Sender("s")
    sender.add_flow("f", "r", None, ServiceKind.DIRECT, DuplicationPolicy())
    sender.flows["f"].next_seq = SEQ_MASK
    assert sender.next_packet("f", b"", 0).seq == SEQ_MASK
    assert sender.next_packet("f", b"", 0).seq == 0


# ---------------------------------------------------------------------------
# loss detector

def cbr(detector, seqs, transit=80 * MS):
    """Feed a 10 ms CBR stream; returns everything the detector NACKs on arrival."""
    out = []
    for seq in seqs:
        out += detector.on_arrival(seq, seq * 10 * MS + transit, seq * 10 * MS)
    return out


def test_gap_waits_for_the_reorder_tolerance():
    detector = LossDetector(25 * MS, RTT)
    assert cbr(detector, range(20)) == []

    # 20 and 21 are missing when 22 shows up; each gets 25 ms past its expected arrival
    assert detector.on_arrival(22, 300 * MS, 220 * MS) == []
    assert detector.suspects == {20: 305 * MS, 21: 315 * MS}
    assert detector.on_arrival(21, 304 * MS, 210 * MS) == []  # 14 ms late, within the tolerance
    assert detector.timer_deadline == 305 * MS

    assert detector.on_timer(305 * MS) == [20]
    assert detector.on_timer(305 * MS) == []  # stale
    assert detector.suspects == {}


def test_zero_tolerance_nacks_at_the_gap():
    detector = LossDetector(25 * MS, RTT, reorder_tolerance=0)
    cbr(detector, range(20))
    assert detector.on_arrival(21, 290 * MS, 210 * MS) == [20]
    assert detector.on_arrival(20, 291 * MS, 200 * MS) == []
    assert detector.on_arrival(23, 320 * MS, 230 * MS) == [22]


def test_timers_follow_the_mode():
    detector = LossDetector(25 * MS, RTT)
    cbr(detector, [0])
    assert detector.mode == DetectorMode.IDLE
    assert detector.timer_deadline == 80 * MS + RTT
    cbr(detector, range(1, 20))
    assert detector.mode == DetectorMode.IN_BURST
    # seq 20 is expected at 280 ms
    assert detector.timer_deadline == 280 * MS + 25 * MS

    # small timer fires: the next seq is NACKed and the timer re-arms one send gap later
    assert detector.on_timer(305 * MS) == [20]
    assert detector.timer_deadline == 315 * MS
    assert detector.on_timer(310 * MS) == []  # stale

    # 20 was already NACKed; the end of the burst disarms
    assert detector.on_arrival(21, 310 * MS, 210 * MS, burst_end=True) == []
    assert detector.timer_deadline is None
    assert detector.nacked == set()


def test_first_arrivals_widen_the_transit_bound():
    detector = LossDetector(25 * MS, RTT)
    cbr(detector, [0])
    assert detector.slowest_transit() == 80 * MS + 25 * MS
    cbr(detector, range(1, 16))
    assert detector.slowest_transit() == 80 * MS


def test_jitter_below_the_tolerance_is_never_nacked():
    rng = np.random.default_rng(3)
    detector = LossDetector(25 * MS, RTT)
    count = 20_000
    sent = np.arange(count) * 10 * MS
    arrivals = sent + 80 * MS + rng.uniform(-24 * MS, 24 * MS, size=count).astype(int)
    nacked = []
    for seq in np.argsort(arrivals, kind="stable"):
        now = int(arrivals[seq])
        while detector.timer_deadline is not None and detector.timer_deadline < now:
            nacked += detector.on_timer(detector.timer_deadline)
        nacked += detector.on_arrival(int(seq), now, int(sent[seq]))
    assert nacked == []


def test_detector_state_stays_bounded():
    detector = LossDetector(25 * MS, RTT)
    nacked = []
    for seq in range(5000):
        if seq % 50 == 7:
            continue
        now = seq * 10 * MS + 80 * MS
        while detector.timer_deadline is not None and detector.timer_deadline < now:
            nacked += detector.on_timer(detector.timer_deadline)
        nacked += detector.on_arrival(seq, now, seq * 10 * MS)
    assert nacked == list(range(7, 5000, 50))
    assert len(detector.suspects) <= 1
    assert detector.nacked == set() and detector.seen == set()


def test_small_timeout_must_be_below_long():
    with pytest.raises(ValueError):
        LossDetector(RTT, RTT)


# ---------------------------------------------------------------------------
# receiver

def make_receiver(scheduler, outbox, events, service=ServiceKind.CACHING, **detector):
    receiver = Receiver("r", transmit=outbox, schedule=scheduler,
                        detector=DetectorConfig(**detector), events=events)
    receiver.add_flow("a", service, "dc2", RTT, recovery_budget=BUDGET)
    return receiver


def arrive(scheduler, receiver, seq, t, markers=frozenset(), payload=None, sent_at=None):
    sent_at = t - 80 * MS if sent_at is None else sent_at
    pkt = Packet(PacketKind.DATA, "a", seq, payload or f"p{seq}".encode(), sent_at=sent_at,
                 markers=frozenset(markers))
    scheduler(t, lambda: receiver.on_receive(pkt, t))


@pytest.mark.parametrize("drop", [None, 50_000])
def test_lossless_run_sends_no_nacks(scheduler, outbox, drop):
    """10^5 packets with jitter just under the 25 ms small timeout: no NACKs, or one for a single gap."""
    receiver = make_receiver(scheduler, outbox, None, service=ServiceKind.CODING)
    rng = np.random.default_rng(7)
    count = 100_000
    jitter = rng.uniform(-24.9 * MS, 24.9 * MS, size=count).astype(int)
    for seq in range(count):
        if seq == drop:
            continue
        markers = {BURST_END} if seq == count - 1 else set()
        sent_at = seq * 10 * MS
        arrive(scheduler, receiver, seq, sent_at + 80 * MS + int(jitter[seq]), markers, sent_at=sent_at)
    scheduler.run_until(count * 10 * MS + 10_000 * MS)

    nacks = outbox.of_kind(PacketKind.NACK)
    if drop is None:
        assert nacks == []
    else:
        assert [n.seqs for n in nacks] == [(drop,)]


def stream_with_gap(scheduler, receiver):
    """Seqs 0-19 every 10 ms, then 21 closing the burst; seq 20 (due at 200 ms) never shows up."""
    for seq in range(20):
        arrive(scheduler, receiver, seq, seq * 10 * MS)
    arrive(scheduler, receiver, 21, 210 * MS, {BURST_END})


def test_nack_carries_deadline_and_requester(scheduler, outbox, events):
    receiver = make_receiver(scheduler, outbox, events)
    stream_with_gap(scheduler, receiver)
    scheduler.run_until(220 * MS)
    assert outbox.of_kind(PacketKind.NACK) == []

    # declared lost once 25 ms late
    scheduler.run_until(1000 * MS)
    [nack] = outbox.of_kind(PacketKind.NACK)
    assert nack.seqs == (20,) and nack.dst == "dc2" and nack.requester == "r"
    assert nack.detected_at == 225 * MS and nack.deadline == 225 * MS + BUDGET
    [record] = events.select("nack")
    assert record.detail["reason"] == "gap"


def test_direct_only_flows_never_nack(scheduler, outbox, events):
    receiver = make_receiver(scheduler, outbox, events, service=ServiceKind.DIRECT)
    for seq, t in [(0, 0), (5, 50 * MS)]:
        arrive(scheduler, receiver, seq, t)
    scheduler.run_until(5000 * MS)
    assert outbox.of_kind(PacketKind.NACK) == []


def test_recovered_packet_is_delivered_once(scheduler, outbox, events):
    receiver = make_receiver(scheduler, outbox, events)
    recovered = Packet(PacketKind.RECOVERED, "a", 4, b"p4", sent_at=0, via="cache")
    out = receiver.on_receive(recovered, 100 * MS)
    assert [d.via for d in out.deliveries] == ["cache"]
    assert receiver.on_receive(recovered, 101 * MS).deliveries == []
    assert [r.detail["via"] for r in events.select("deliver")] == ["cache"]


def test_replay_buffer_drops_old_payloads():
    replay = ReplayBuffer(retention=100 * MS)
    for seq in range(1000):
        replay.put(seq, b"x", seq * 10 * MS)
    assert len(replay) == 11
    assert replay.get(989, 9990 * MS) == b"x"
    assert replay.get(988, 9990 * MS) is None


def test_coop_request_answered_from_replay_buffer(scheduler, outbox, events):
    receiver = make_receiver(scheduler, outbox, events)
    arrive(scheduler, receiver, 0, 0, payload=b"kept")
    scheduler.run_until(0)
    request = Packet(PacketKind.COOP_REQUEST, "a", seqs=(0, 1), src="dc2", requester="dc2", batch_id="dc1/1")
    receiver.on_receive(request, 50 * MS)
    [resp] = outbox.of_kind(PacketKind.COOP_RESPONSE)
    assert resp.payload == b"kept" and resp.dst == "dc2" and resp.batch_id == "dc1/1"

    outbox.clear()
    receiver.on_receive(request, 2 * RTT + 1)  # past the default retention
    assert outbox.of_kind(PacketKind.COOP_RESPONSE) == []


def in_stream_parities(payloads):
    ingress = IngressDC("dc1", CodingParams(k=2, m_cross=1, s=0.2, cross_enabled=False))
    ingress.assign_flow("a", "dc2")
    out = []
    for seq, payload in enumerate(payloads):
        out += ingress.dc1_process(Packet(PacketKind.DATA, "a", seq, payload, sent_at=0), "a", 0)
    return out


def test_in_stream_decode_fills_the_hole(scheduler, outbox, events):
    payloads = [f"payload-{i}".encode() * (i + 1) for i in range(5)]
    [parity] = in_stream_parities(payloads)
    receiver = make_receiver(scheduler, outbox, events, service=ServiceKind.CODING)
    for seq in (0, 1, 3, 4):
        arrive(scheduler, receiver, seq, seq * 10 * MS, payload=payloads[seq])
    scheduler.run_until(40 * MS)

    out = receiver.on_receive(parity.copy(dst="r", deadline=200 * MS), 60 * MS)
    assert [(d.seq, d.via, d.payload) for d in out.deliveries] == [(2, "in_stream", payloads[2])]


def test_local_decode_entry_point(scheduler, outbox, events):
    payloads = [bytes([65 + i]) * (i + 3) for i in range(5)]
    [parity] = in_stream_parities(payloads)
    receiver = make_receiver(scheduler, outbox, events, service=ServiceKind.CODING)
    for seq in (0, 1, 2, 4):
        arrive(scheduler, receiver, seq, seq * 10 * MS, payload=payloads[seq])
    scheduler.run_until(40 * MS)

    [recovered] = receiver.local_in_stream_decode("a", [parity.copy(deadline=200 * MS)], 50 * MS)
    assert (recovered.seq, recovered.payload) == (3, payloads[3])
    # complete block: the parity is a no-op
    assert receiver.local_in_stream_decode("a", [parity.copy(deadline=200 * MS)], 60 * MS) == []
    assert receiver.flows["a"].pending == {}


def test_in_stream_failure_escalates(scheduler, outbox, events):
    payloads = [bytes([i]) * 8 for i in range(5)]
    [parity] = in_stream_parities(payloads)
    receiver = make_receiver(scheduler, outbox, events, service=ServiceKind.CODING,
                             escalate_in_stream_failure=True)
    for seq in (0, 3, 4):
        arrive(scheduler, receiver, seq, seq * 10 * MS, payload=payloads[seq])
    scheduler.run_until(40 * MS)
    outbox.clear()

    assert receiver.on_receive(parity.copy(dst="r", deadline=100 * MS), 60 * MS).deliveries == []
    scheduler.run_until(101 * MS)
    [failed] = events.select("in_stream_failed")
    assert failed.detail["missing"] == [1, 2]
    escalated = [n for n in outbox.of_kind(PacketKind.NACK) if n.escalated]
    assert [n.seqs for n in escalated] == [(1, 2)]


def test_report_stats_counts_per_window(scheduler, outbox, events):
    receiver = make_receiver(scheduler, outbox, events)
    stream_with_gap(scheduler, receiver)
    scheduler.run_until(1000 * MS)
    recovered = Packet(PacketKind.RECOVERED, "a", 20, b"p20", sent_at=120 * MS, via="cache")
    receiver.on_receive(recovered, 250 * MS)

    early = receiver.report_stats("a", 0, 200 * MS)
    assert (early.delivered, early.losses, early.recoveries, early.nacks) == (20, 0, 0, 0)
    late = receiver.report_stats("a", 200 * MS, 300 * MS)
    assert (late.delivered, late.losses, late.recoveries, late.nacks) == (2, 1, 1, 1)
    assert (late.total_losses, late.total_recoveries, late.total_nacks) == (1, 1, 1)


def test_report_stats_windows_latency(scheduler, outbox, events):
    receiver = make_receiver(scheduler, outbox, events, service=ServiceKind.DIRECT)
    for seq in range(10):
        arrive(scheduler, receiver, seq, 80 * MS + seq * 10 * MS)
    scheduler.run_until(1000 * MS)
    stats = receiver.report_stats("a", 0, 130 * MS)
    assert stats.delivered == 5
    assert stats.p50_latency_ms == pytest.approx(80.0)
    assert receiver.report_stats("a", 500 * MS, 600 * MS).p95_latency_ms is None
