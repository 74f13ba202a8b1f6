"""Tests for the DC2 cache, coded store and cooperative recovery."""

import pytest

from src.egress import EgressDC, FailureClass, NackOutcome
from src.ingress import IngressDC
from src.models import CodingParams, ServiceKind
from src.packets import CodingScope, Packet, PacketKind

MS = 1000
TTL = 400 * MS
RECEIVERS = {"a": "ra", "b": "rb", "c": "rc", "d": "rd"}
PAYLOADS = {"a": b"alpha-payload", "b": b"bravo", "c": b"charlie-is-longest", "d": b"d"}


def data(flow, seq=0, t=0, service=ServiceKind.CACHING):
    return Packet(PacketKind.DATA, flow, seq, PAYLOADS[flow], sent_at=t, service=service)


def nack(flow, seqs, now, budget=150 * MS, escalated=False):
    return Packet(PacketKind.NACK, flow, seqs=tuple(seqs), src=RECEIVERS[flow], dst="dc2",
                  requester=RECEIVERS[flow], detected_at=now, deadline=now + budget, escalated=escalated)


def response(flow, batch_id, seq=0):
    return Packet(PacketKind.COOP_RESPONSE, flow, seq, PAYLOADS[flow], src=RECEIVERS[flow], dst="dc2",
                  batch_id=batch_id)


def coded_batch(flows, m, s=0.0, per_flow=1):
    params = CodingParams(k=max(len(flows), 2), m_cross=min(m, max(len(flows), 2) - 1) if s else m, s=s,
                          cross_enabled=not s)
    ingress = IngressDC("dc1", params)
    for flow in flows:
        ingress.assign_flow(flow, "dc2")
    out = []
    for seq in range(per_flow):
        for flow in flows:
            out += ingress.dc1_process(data(flow, seq, service=ServiceKind.CODING), flow, 0)
    return out


@pytest.fixture
def dc2(scheduler, outbox, events):
    yield EgressDC("dc2", TTL, transmit=outbox, schedule=scheduler, receiver_of=RECEIVERS.get, events=events)


def test_cache_hit_returns_the_packet(dc2, outbox):
    dc2.store(data("a"), 0)
    outcome = dc2.handle_nack(nack("a", [0], 90 * MS), 90 * MS)
    assert outcome == {0: NackOutcome.CACHE_HIT}
    [recovered] = outbox.of_kind(PacketKind.RECOVERED)
    assert recovered.payload == PAYLOADS["a"] and recovered.dst == "ra" and recovered.via == "cache"


def test_nack_before_data_waits_for_it(dc2, outbox, scheduler):
    assert dc2.handle_nack(nack("a", [0], 10 * MS), 10 * MS) == {0: NackOutcome.PARKED}
    dc2.store(data("a"), 12 * MS)
    [recovered] = outbox.of_kind(PacketKind.RECOVERED)
    assert recovered.seq == 0
    scheduler.run_until(1000 * MS)
    assert sum(dc2.failures.values()) == 0


def test_stale_cache_entry_is_never_served(dc2, outbox, scheduler):
    dc2.store(data("a"), 0)
    now = TTL + 1
    assert dc2.handle_nack(nack("a", [0], now), now) == {0: NackOutcome.PARKED}
    scheduler.run_until(now + 200 * MS)
    assert outbox.of_kind(PacketKind.RECOVERED) == []
    assert dc2.failures[FailureClass.NO_STATE.value] == 1


def test_data_after_the_deadline_does_not_answer(dc2, outbox):
    dc2.handle_nack(nack("a", [0], 10 * MS, budget=5 * MS), 10 * MS)
    dc2.store(data("a"), 100 * MS)
    assert outbox.of_kind(PacketKind.RECOVERED) == []
    assert dc2.failures[FailureClass.DEADLINE.value] == 1


def test_cooperative_recovery_solicits_helpers(dc2, outbox):
    coded = coded_batch(["a", "b", "c"], m=1)
    for pkt in coded:
        dc2.store(pkt, 20 * MS)
    batch_id = coded[0].coded.batch_id

    assert dc2.handle_nack(nack("a", [0], 80 * MS), 80 * MS) == {0: NackOutcome.COOPERATIVE}
    requests = outbox.of_kind(PacketKind.COOP_REQUEST)
    assert sorted(r.dst for r in requests) == ["rb", "rc"]
    assert all(r.batch_id == batch_id and r.seqs == (0,) for r in requests)

    assert dc2.handle_coop_response(response("b", batch_id), 95 * MS) == []
    [recovered] = dc2.handle_coop_response(response("c", batch_id), 96 * MS)
    assert recovered.payload == PAYLOADS["a"] and recovered.via == "cross" and recovered.dst == "ra"


def test_second_coded_packet_masks_a_straggler(dc2, outbox):
    coded = coded_batch(["a", "b", "c"], m=2)
    for pkt in coded:
        dc2.store(pkt, 20 * MS)
    batch_id = coded[0].coded.batch_id
    dc2.handle_nack(nack("a", [0], 80 * MS), 80 * MS)
    [recovered] = dc2.handle_coop_response(response("b", batch_id), 95 * MS)
    assert recovered.payload == PAYLOADS["a"]
    # the slow helper's answer arrives after decoding and is ignored
    assert dc2.handle_coop_response(response("c", batch_id), 400 * MS) == []


def test_late_helper_misses_the_deadline(dc2, outbox, scheduler):
    coded = coded_batch(["a", "b", "c"], m=1)
    for pkt in coded:
        dc2.store(pkt, 20 * MS)
    batch_id = coded[0].coded.batch_id
    dc2.handle_nack(nack("a", [0], 80 * MS, budget=100 * MS), 80 * MS)
    dc2.handle_coop_response(response("b", batch_id), 95 * MS)
    scheduler.run_until(181 * MS)
    assert dc2.handle_coop_response(response("c", batch_id), 300 * MS) == []
    assert outbox.of_kind(PacketKind.RECOVERED) == []
    assert dc2.failures[FailureClass.INSUFFICIENT_SYMBOLS.value] == 1


def test_decoded_batch_answers_later_nacks(dc2, outbox):
    coded = coded_batch(["a", "b", "c", "d"], m=2)
    for pkt in coded:
        dc2.store(pkt, 20 * MS)
    batch_id = coded[0].coded.batch_id
    dc2.handle_nack(nack("a", [0], 80 * MS), 80 * MS)
    dc2.handle_coop_response(response("c", batch_id), 90 * MS)
    dc2.handle_coop_response(response("d", batch_id), 91 * MS)
    assert dc2.handle_nack(nack("b", [0], 100 * MS), 100 * MS) == {0: NackOutcome.DECODED}
    payloads = {p.flow_id: p.payload for p in outbox.of_kind(PacketKind.RECOVERED)}
    assert payloads == {"a": PAYLOADS["a"], "b": PAYLOADS["b"]}


def test_missing_flows_are_not_solicited(dc2, outbox):
    coded = coded_batch(["a", "b", "c", "d"], m=2)
    for pkt in coded:
        dc2.store(pkt, 20 * MS)
    dc2.handle_nack(nack("a", [0], 80 * MS), 80 * MS)
    dc2.handle_nack(nack("b", [0], 81 * MS), 81 * MS)
    requested = [r.flow_id for r in outbox.of_kind(PacketKind.COOP_REQUEST)]
    assert sorted(requested) == ["b", "c", "d"]
    assert requested.count("b") == 1


def test_in_stream_parities_go_to_the_receiver(dc2, outbox):
    parities = coded_batch(["a"], m=1, s=0.2, per_flow=5)
    assert len(parities) == 1
    dc2.store(parities[0], 30 * MS)
    assert dc2.handle_nack(nack("a", [2], 90 * MS), 90 * MS) == {2: NackOutcome.IN_STREAM}
    [sent] = outbox.of_kind(PacketKind.CODED)
    assert sent.dst == "ra" and sent.deadline == 90 * MS + 150 * MS


def test_more_losses_than_parities_skip_in_stream(dc2, outbox, scheduler):
    parities = coded_batch(["a"], m=1, s=0.2, per_flow=5)
    dc2.store(parities[0], 30 * MS)
    outcome = dc2.handle_nack(nack("a", [1, 2], 90 * MS), 90 * MS)
    assert outcome == {1: NackOutcome.PARKED, 2: NackOutcome.PARKED}
    assert outbox.of_kind(PacketKind.CODED) == []


def test_expired_state_is_dropped(dc2):
    """20 s of four 10 ms flows: the cache and coded store hold one ttl's worth, no more."""
    ingress = IngressDC("dc1", CodingParams(k=4, m_cross=2))
    for flow in "abcd":
        ingress.assign_flow(flow, "dc2")
    sizes = {}
    for seq in range(2000):
        now = seq * 10 * MS
        for flow in "abcd":
            pkt = data(flow, seq, now)
            dc2.store(pkt, now)
            for coded in ingress.dc1_process(pkt.copy(service=ServiceKind.CODING), flow, now):
                dc2.store(coded, now)
        if seq in (500, 1999):
            sizes[seq] = (len(dc2.cache), len(dc2.store_), len(dc2.store_._cross_index))
    # packets stored in the last 400 ms: seqs 1959-1999
    assert sizes[1999] == (4 * 41, 41, 4 * 41)
    assert sizes[500] == sizes[1999]


def test_in_stream_nacks_still_take_cross_recoveries(dc2, outbox):
    ingress = IngressDC("dc1", CodingParams(k=3, m_cross=2, s=0.2))
    for flow in "abc":
        ingress.assign_flow(flow, "dc2")
    coded = []
    for seq in range(5):
        for flow in "abc":
            coded += ingress.dc1_process(data(flow, seq, service=ServiceKind.CODING), flow, 0)
    for pkt in coded:
        dc2.store(pkt, 30 * MS)
    [batch_id] = {p.coded.batch_id for p in coded
                  if p.coded.scope == CodingScope.CROSS and p.coded.position_of("a", 2) is not None}

    # answered with a's own parity: no helpers are asked on its behalf
    assert dc2.handle_nack(nack("a", [2], 90 * MS), 90 * MS) == {2: NackOutcome.IN_STREAM}
    assert outbox.of_kind(PacketKind.COOP_REQUEST) == []

    dc2.handle_nack(nack("b", [2], 95 * MS, escalated=True), 95 * MS)
    assert [r.flow_id for r in outbox.of_kind(PacketKind.COOP_REQUEST)] == ["c"]
    recovered = dc2.handle_coop_response(response("c", batch_id, seq=2), 100 * MS)
    assert {(p.flow_id, p.seq, p.payload) for p in recovered} == {("a", 2, PAYLOADS["a"]), ("b", 2, PAYLOADS["b"])}
