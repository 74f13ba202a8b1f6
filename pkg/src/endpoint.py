"""Sender and receiver endpoints: duplication, loss detection, NACKs, local decode."""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Deque, Dict, List, Optional, Set, Tuple

import numpy as np

from . import codec
from .errors import CodecError, PolicyError, UnknownFlowError
from .events import EventLog
from .models import DeliveryStats, DetectorConfig, DuplicationMode, DuplicationPolicy, ServiceKind
from .packets import BURST_END, CodingScope, Packet, PacketKind

logger = logging.getLogger(__name__)

Transmit = Callable[[Packet, int], None]
HopTransmit = Callable[[str, Packet, int], None]
Scheduler = Callable[[int, Callable[[], None]], None]

SEQ_MASK = (1 << 64) - 1


# ---------------------------------------------------------------------------
# Sender

@dataclass
class SenderFlow:
    flow_id: str
    destination: str
    ingress_dc: Optional[str]
    service: ServiceKind
    policy: DuplicationPolicy
    next_seq: int = 0


@dataclass(frozen=True)
class Transmission:
    next_hop: str
    packet: Packet


class Sender:
    def __init__(self, name: str, transmit: Optional[HopTransmit] = None, events: Optional[EventLog] = None):
        self.name = name
        self.transmit = transmit
        self.events = events
        self.flows: Dict[str, SenderFlow] = {}

    def add_flow(self, flow_id: str, destination: str, ingress_dc: Optional[str],
                 service: ServiceKind, policy: DuplicationPolicy) -> None:
        check_policy(policy, service)
        self.flows[flow_id] = SenderFlow(flow_id, destination, ingress_dc, service, policy)

    def set_service(self, flow_id: str, service: ServiceKind) -> None:
        flow = self._flow(flow_id)
        check_policy(flow.policy, service)
        flow.service = service

    def _flow(self, flow_id: str) -> SenderFlow:
        try:
            return self.flows[flow_id]
        except KeyError:
            raise UnknownFlowError(flow_id) from None

    def next_packet(self, flow_id: str, payload: bytes, now: int, markers=frozenset()) -> Packet:
        flow = self._flow(flow_id)
        seq = flow.next_seq
        flow.next_seq = (seq + 1) & SEQ_MASK
        return Packet(PacketKind.DATA, flow_id, seq, payload, sent_at=now, src=self.name,
                      dst=flow.destination, service=flow.service, markers=frozenset(markers))

    def send(self, pkt: Packet, policy: Optional[DuplicationPolicy] = None,
             now: Optional[int] = None) -> List[Transmission]:
        """Fan a data packet out to the direct path and/or the ingress DC."""
        flow = self._flow(pkt.flow_id)
        policy = policy or flow.policy
        service = flow.service
        check_policy(policy, service)
        out: List[Transmission] = []

        if service == ServiceKind.DIRECT or policy.mode == DuplicationMode.NONE:
            out.append(Transmission(flow.destination, pkt))
        elif service == ServiceKind.FORWARDING:
            out.append(Transmission(flow.ingress_dc, pkt.copy(overlay=True)))
            if policy.duplicate_both:
                out.append(Transmission(flow.destination, pkt))
        else:
            out.append(Transmission(flow.destination, pkt))
            if policy.allows(pkt.markers):
                out.append(Transmission(flow.ingress_dc, pkt.copy()))

        if now is not None:
            if self.events is not None:
                self.events.record(now, "send", self.name, flow=pkt.flow_id, seq=pkt.seq,
                                   kind=PacketKind.DATA.value, peer=flow.destination,
                                   detail={"service": service.value,
                                           "direct": any(t.next_hop == flow.destination for t in out),
                                           "overlay": any(t.packet.overlay for t in out)})
            if self.transmit is not None:
                for t in out:
                    self.transmit(t.next_hop, t.packet, now)
        return out


def check_policy(policy: DuplicationPolicy, service: ServiceKind) -> None:
    if policy.mode == DuplicationMode.NONE and service != ServiceKind.DIRECT:
        raise PolicyError(f"duplication NONE is only valid with the direct service, not {service.value}")


# ---------------------------------------------------------------------------
# Loss detection

class DetectorMode(str, Enum):
    IN_BURST = "in_burst"
    IDLE = "idle"


@dataclass
class LossDetectorState:
    mode: DetectorMode
    next_expected_seq: int
    small_timeout: int
    long_timeout: int
    history: Deque[int]
    timer_deadline: Optional[int] = None
    last_arrival: Optional[int] = None
    highest_seen: int = -1
    highest_sent: Optional[int] = None


class LossDetector:
    """Two-state detector: small timer inside bursts, long timer between them.

    The detector is IN_BURST when the last inter-arrival is at most
    ``burst_factor`` times the median of the recent history.

    A seq missing from a gap is only a reorder suspect at first. It is NACKed
    once it is overdue by ``reorder_tolerance``: its expected arrival is the
    latest send time it can have (bounded by the later packets and the
    smallest recent send spacing) plus the slowest transit in the recent
    window. The small timer predicts the next expected seq the same way.
    Arrival jitter below the tolerance therefore never produces a NACK.
    Each missing seq is NACKed at most once.
    """

    def __init__(self, small_timeout: int, long_timeout: int, history: int = 16,
                 burst_factor: float = 2.0, max_silence: int = 5_000_000,
                 reorder_tolerance: Optional[int] = None, transit_window: int = 128):
        if small_timeout >= long_timeout:
            raise ValueError(f"small timeout {small_timeout} must be below long timeout {long_timeout}")
        self.state = LossDetectorState(DetectorMode.IDLE, 0, small_timeout, long_timeout,
                                       deque(maxlen=history))
        self.burst_factor = burst_factor
        self.max_silence = max_silence
        self.reorder_tolerance = small_timeout if reorder_tolerance is None else reorder_tolerance
        self.transits: Deque[int] = deque(maxlen=transit_window)
        self.send_gaps: Deque[int] = deque(maxlen=history)
        # seq -> time at which it is declared lost
        self.suspects: Dict[int, int] = {}
        # both sets only hold seqs above highest_seen
        self.nacked: Set[int] = set()
        self.seen: Set[int] = set()

    @property
    def mode(self) -> DetectorMode:
        return self.state.mode

    @property
    def timer_deadline(self) -> Optional[int]:
        deadlines = list(self.suspects.values())
        if self.state.timer_deadline is not None:
            deadlines.append(self.state.timer_deadline)
        return min(deadlines) if deadlines else None

    def median_gap(self) -> int:
        if not self.state.history:
            return self.state.small_timeout
        return max(1, int(np.median(self.state.history)))

    def send_gap(self) -> int:
        """Median sender spacing between consecutive seqs."""
        if not self.send_gaps:
            return self.median_gap()
        return max(1, int(np.median(self.send_gaps)))

    def slowest_transit(self) -> int:
        """Longest transit a packet may still take without being late."""
        slowest = max(self.transits)
        if len(self.transits) < self.state.history.maxlen:
            # too few samples: the fastest one plus the tolerance bounds the slowest
            slowest = max(slowest, min(self.transits) + self.reorder_tolerance)
        return slowest

    def _latest_arrival(self, seq: int, later_seq: int, later_sent: int) -> int:
        spacing = min(self.send_gaps) if self.send_gaps else 0
        return later_sent - (later_seq - seq) * spacing + self.slowest_transit()

    def on_arrival(self, seq: int, now: int, sent_at: int, burst_end: bool = False) -> List[int]:
        """Register a first-hand arrival; returns seqs to NACK now."""
        st = self.state
        if st.last_arrival is not None:
            st.history.append(now - st.last_arrival)
        st.last_arrival = now
        self.transits.append(now - sent_at)
        self.suspects.pop(seq, None)

        if seq > st.highest_seen:
            if st.highest_sent is not None:
                self.send_gaps.append(max(0, sent_at - st.highest_sent) // (seq - st.highest_seen))
            for s in range(st.highest_seen + 1, seq):
                if s not in self.nacked and s not in self.seen:
                    self.suspects[s] = self._latest_arrival(s, seq, sent_at) + self.reorder_tolerance
            st.highest_seen = seq
            st.highest_sent = sent_at
            self._trim()
        st.next_expected_seq = max(st.next_expected_seq, seq + 1)

        if st.history and st.history[-1] <= self.burst_factor * np.median(st.history):
            st.mode = DetectorMode.IN_BURST
        else:
            st.mode = DetectorMode.IDLE

        if burst_end:
            st.timer_deadline = None
        elif st.mode == DetectorMode.IN_BURST:
            expected_sent = st.highest_sent + (st.next_expected_seq - st.highest_seen) * self.send_gap()
            st.timer_deadline = max(now, expected_sent + self.slowest_transit() + st.small_timeout)
        else:
            st.timer_deadline = now + st.long_timeout
        return self._overdue(now)

    def _overdue(self, now: int) -> List[int]:
        due = sorted(s for s, deadline in self.suspects.items() if deadline <= now)
        for s in due:
            del self.suspects[s]
        return due

    def _trim(self) -> None:
        floor = self.state.highest_seen
        if self.nacked:
            self.nacked = {s for s in self.nacked if s > floor}
        if self.seen:
            self.seen = {s for s in self.seen if s > floor}

    def on_recovered(self, seq: int) -> None:
        self.suspects.pop(seq, None)
        if seq > self.state.highest_seen:
            self.seen.add(seq)

    def on_timer(self, now: int) -> List[int]:
        """Timer expiry for overdue suspects and the next expected packet; stale timers return nothing."""
        st = self.state
        if self.timer_deadline is None or self.timer_deadline != now:
            return []
        out = self._overdue(now)
        if st.timer_deadline is None or st.timer_deadline > now:
            return out

        seq = st.next_expected_seq
        st.next_expected_seq += 1
        if seq not in self.nacked and seq not in self.seen:
            self.nacked.add(seq)
            out.append(seq)

        silence = now - st.last_arrival if st.last_arrival is not None else 0
        if st.mode == DetectorMode.IN_BURST and silence < self.max_silence:
            st.timer_deadline = now + self.send_gap()
        else:
            st.mode = DetectorMode.IDLE
            st.timer_deadline = None
        return out


# ---------------------------------------------------------------------------
# Receiver state

class ReplayBuffer:
    """Recently delivered payloads by seq, kept for ``retention``."""

    def __init__(self, retention: int):
        self.retention = retention
        self.packets: Dict[int, Tuple[bytes, int]] = {}
        self._order: Deque[Tuple[int, int]] = deque()

    def put(self, seq: int, payload: bytes, now: int) -> None:
        self.packets[seq] = (payload, now)
        self._order.append((now, seq))
        self.purge(now)

    def purge(self, now: int) -> None:
        while self._order and now - self._order[0][0] > self.retention:
            stored_at, seq = self._order.popleft()
            entry = self.packets.get(seq)
            if entry is not None and entry[1] == stored_at:
                del self.packets[seq]

    def get(self, seq: int, now: int) -> Optional[bytes]:
        self.purge(now)
        entry = self.packets.get(seq)
        return entry[0] if entry is not None else None

    def __contains__(self, seq: int) -> bool:
        return seq in self.packets

    def __len__(self) -> int:
        return len(self.packets)


@dataclass
class PendingParities:
    batch_id: str
    meta: object
    deadline: int
    parities: Dict[int, bytes] = field(default_factory=dict)
    done: bool = False


@dataclass
class Delivery:
    flow_id: str
    seq: int
    payload: bytes
    via: str
    at: int
    sent_at: int

    @property
    def recovered(self) -> bool:
        return self.via not in ("direct", "overlay")


@dataclass
class ReceiverFlow:
    flow_id: str
    service: ServiceKind
    egress_dc: Optional[str]
    rtt: int
    recovery_budget: int
    detector: LossDetector
    replay: ReplayBuffer
    delivered: Set[int] = field(default_factory=set)
    deliveries: List[Delivery] = field(default_factory=list)
    pending: Dict[str, PendingParities] = field(default_factory=dict)
    nacks: int = 0
    nacked_seqs: int = 0
    in_stream_failures: int = 0
    timer_token: int = 0
    # (time, newly NACKed seqs) per NACK sent
    nack_log: List[Tuple[int, int]] = field(default_factory=list)


@dataclass
class ReceiveOutcome:
    deliveries: List[Delivery] = field(default_factory=list)
    nacks: List[Packet] = field(default_factory=list)


class Receiver:
    """Receiver host logic for every flow that terminates here."""

    def __init__(self, name: str, transmit: Transmit, schedule: Scheduler,
                 detector: Optional[DetectorConfig] = None, events: Optional[EventLog] = None,
                 on_deliver: Optional[Callable[[Delivery], None]] = None):
        self.name = name
        self.transmit = transmit
        self.schedule = schedule
        self.detector_config = detector or DetectorConfig()
        self.events = events
        self.on_deliver = on_deliver
        self.flows: Dict[str, ReceiverFlow] = {}

    def add_flow(self, flow_id: str, service: ServiceKind, egress_dc: Optional[str], rtt: int,
                 recovery_budget: Optional[int] = None, retention: Optional[int] = None) -> ReceiverFlow:
        cfg = self.detector_config
        small = int(round(cfg.small_timeout_ms * 1000))
        long_ = int(round(cfg.long_timeout_ms * 1000)) if cfg.long_timeout_ms else max(rtt, small + 1)
        tolerance = int(round(cfg.reorder_tolerance_ms * 1000)) if cfg.reorder_tolerance_ms is not None else None
        flow = ReceiverFlow(
            flow_id=flow_id,
            service=service,
            egress_dc=egress_dc,
            rtt=rtt,
            recovery_budget=recovery_budget if recovery_budget is not None else rtt,
            detector=LossDetector(small, long_, cfg.history, cfg.burst_factor,
                                  int(round(cfg.max_silence_ms * 1000)), tolerance, cfg.transit_window),
            replay=ReplayBuffer(retention if retention is not None else 2 * rtt),
        )
        self.flows[flow_id] = flow
        return flow

    def _flow(self, flow_id: str) -> ReceiverFlow:
        try:
            return self.flows[flow_id]
        except KeyError:
            raise UnknownFlowError(flow_id) from None

    @staticmethod
    def _detecting(flow: ReceiverFlow) -> bool:
        return flow.service in (ServiceKind.CACHING, ServiceKind.CODING) and flow.egress_dc is not None

    # ------------------------------------------------------------------

    def on_receive(self, pkt: Packet, now: int) -> ReceiveOutcome:
        if pkt.kind == PacketKind.COOP_REQUEST:
            for resp in self.on_coop_request(pkt, now):
                self.transmit(resp, now)
            return ReceiveOutcome()

        flow = self._flow(pkt.flow_id)
        outcome = ReceiveOutcome()
        if pkt.kind == PacketKind.DATA:
            via = "overlay" if pkt.overlay else "direct"
            delivery = self._deliver(flow, pkt.seq, pkt.payload, via, now, pkt.sent_at)
            if delivery is None:
                return outcome
            outcome.deliveries.append(delivery)
            if self._detecting(flow):
                missing = flow.detector.on_arrival(pkt.seq, now, pkt.sent_at, BURST_END in pkt.markers)
                if missing:
                    outcome.nacks.append(self._nack(flow, missing, now, "gap"))
                self._arm(flow)
            outcome.deliveries += self._retry_in_stream(flow, now)
        elif pkt.kind == PacketKind.RECOVERED:
            delivery = self._deliver(flow, pkt.seq, pkt.payload, pkt.via or "cache", now, pkt.sent_at)
            if delivery is not None:
                outcome.deliveries.append(delivery)
                flow.detector.on_recovered(pkt.seq)
                outcome.deliveries += self._retry_in_stream(flow, now)
        elif pkt.kind == PacketKind.CODED and pkt.coded is not None:
            outcome.deliveries += self._accept_parity(flow, pkt, now)
        return outcome

    def _deliver(self, flow: ReceiverFlow, seq: int, payload: bytes, via: str,
                 now: int, sent_at: int) -> Optional[Delivery]:
        if seq in flow.delivered:
            if self.events is not None:
                self.events.record(now, "duplicate", self.name, flow=flow.flow_id, seq=seq, detail={"via": via})
            return None
        flow.delivered.add(seq)
        flow.replay.put(seq, payload, now)
        delivery = Delivery(flow.flow_id, seq, payload, via, now, sent_at)
        flow.deliveries.append(delivery)
        if self.events is not None:
            self.events.record(now, "deliver", self.name, flow=flow.flow_id, seq=seq,
                               kind=PacketKind.DATA.value, detail={"via": via, "sent_at": sent_at})
        if self.on_deliver is not None:
            self.on_deliver(delivery)
        return delivery

    # ------------------------------------------------------------------
    # NACKs and timers

    def _nack(self, flow: ReceiverFlow, seqs: List[int], now: int, reason: str,
              escalated: bool = False) -> Packet:
        # escalations re-request seqs that were already counted
        fresh = 0 if escalated else len(seqs)
        flow.nacks += 1
        flow.nacked_seqs += fresh
        flow.nack_log.append((now, fresh))
        nack = Packet(
            kind=PacketKind.NACK,
            flow_id=flow.flow_id,
            seqs=tuple(seqs),
            src=self.name,
            dst=flow.egress_dc,
            requester=self.name,
            detected_at=now,
            deadline=now + flow.recovery_budget,
            escalated=escalated,
        )
        if self.events is not None:
            self.events.record(now, "nack", self.name, flow=flow.flow_id, seq=seqs[0],
                               kind=PacketKind.NACK.value, peer=flow.egress_dc,
                               detail={"seqs": list(seqs), "reason": reason, "escalated": escalated})
        logger.debug(f"{self.name}: NACK {flow.flow_id} {list(seqs)} ({reason})")
        self.transmit(nack, now)
        return nack

    def _arm(self, flow: ReceiverFlow) -> None:
        deadline = flow.detector.timer_deadline
        if deadline is None:
            return
        flow.timer_token += 1
        token = flow.timer_token
        self.schedule(deadline, lambda: self._on_timer(flow, token, deadline))

    def _on_timer(self, flow: ReceiverFlow, token: int, now: int) -> None:
        if token != flow.timer_token or not self._detecting(flow):
            return
        mode = flow.detector.mode
        expected = flow.detector.state.next_expected_seq
        missing = flow.detector.on_timer(now)
        if missing:
            if expected not in missing:
                reason = "gap"
            else:
                reason = "small_timer" if mode == DetectorMode.IN_BURST else "long_timer"
            self._nack(flow, missing, now, reason)
        self._arm(flow)

    # ------------------------------------------------------------------
    # cooperative responses

    def on_coop_request(self, req: Packet, now: int) -> List[Packet]:
        """Answer a DC's cooperative request from the replay buffer."""
        flow = self.flows.get(req.flow_id)
        if flow is None:
            return []
        responses = []
        for seq in req.seqs:
            payload = flow.replay.get(seq, now)
            if payload is None:
                continue
            responses.append(Packet(
                kind=PacketKind.COOP_RESPONSE,
                flow_id=req.flow_id,
                seq=seq,
                payload=payload,
                src=self.name,
                dst=req.requester or req.src,
                batch_id=req.batch_id,
            ))
            if self.events is not None:
                self.events.record(now, "coop_response", self.name, flow=req.flow_id, seq=seq,
                                   kind=PacketKind.COOP_RESPONSE.value, peer=req.requester or req.src,
                                   detail={"batch": req.batch_id})
        return responses

    # ------------------------------------------------------------------
    # in-stream decode

    def _accept_parity(self, flow: ReceiverFlow, pkt: Packet, now: int) -> List[Delivery]:
        meta = pkt.coded
        if meta.scope != CodingScope.IN_STREAM:
            return []
        pending = flow.pending.get(meta.batch_id)
        if pending is not None and now > pending.deadline:
            pending = None
        if pending is None:
            deadline = pkt.deadline if pkt.deadline is not None else now + flow.recovery_budget
            pending = flow.pending[meta.batch_id] = PendingParities(meta.batch_id, meta, deadline)
            self._schedule_parity_expiry(flow, pending)
        elif pkt.deadline is not None and pkt.deadline > pending.deadline:
            pending.deadline = pkt.deadline
            self._schedule_parity_expiry(flow, pending)
        pending.parities[meta.index] = pkt.payload
        return self._try_in_stream(flow, pending, now)

    def _retry_in_stream(self, flow: ReceiverFlow, now: int) -> List[Delivery]:
        out = []
        for pending in list(flow.pending.values()):
            if not pending.done and now <= pending.deadline:
                out += self._try_in_stream(flow, pending, now)
        return out

    def local_in_stream_decode(self, flow_id: str, parities: List[Packet], now: int) -> List[Delivery]:
        """Decode one in-stream block from parities plus this receiver's own packets."""
        flow = self._flow(flow_id)
        out = []
        for pkt in parities:
            out += self._accept_parity(flow, pkt, now)
        return out

    def _try_in_stream(self, flow: ReceiverFlow, pending: PendingParities, now: int) -> List[Delivery]:
        meta = pending.meta
        flow.replay.purge(now)
        present: Dict[int, bytes] = {}
        missing = []
        symbol_len = max((ref.symbol_len for ref in meta.coverage), default=0)
        for pos, ref in enumerate(meta.coverage):
            payload = flow.replay.get(ref.seq, now)
            if payload is None:
                missing.append((pos, ref))
            else:
                present[pos] = payload.ljust(symbol_len, b"\x00")
        if not missing:
            pending.done = True
            flow.pending.pop(pending.batch_id, None)
            return []
        if len(present) + len(pending.parities) < meta.k_effective:
            return []
        for index, parity in pending.parities.items():
            present[meta.k_effective + index] = parity
        try:
            data = codec.decode(codec.SymbolBlock.from_present(meta.k_effective, meta.m, present, symbol_len))
        except CodecError as exc:
            logger.warning(f"{self.name}: in-stream decode of {pending.batch_id} failed: {exc}")
            return []
        pending.done = True
        flow.pending.pop(pending.batch_id, None)
        out = []
        for pos, ref in missing:
            delivery = self._deliver(flow, ref.seq, codec.trim(data[pos], ref.symbol_len),
                                     "in_stream", now, ref.sent_at)
            if delivery is not None:
                flow.detector.on_recovered(ref.seq)
                out.append(delivery)
        return out

    def _schedule_parity_expiry(self, flow: ReceiverFlow, pending: PendingParities) -> None:
        at = pending.deadline + 1
        self.schedule(at, lambda: self._expire_parities(flow, pending, at))

    def _expire_parities(self, flow: ReceiverFlow, pending: PendingParities, now: int) -> None:
        if pending.done or now <= pending.deadline:
            return
        pending.done = True
        if flow.pending.get(pending.batch_id) is pending:
            del flow.pending[pending.batch_id]
        flow.in_stream_failures += 1
        still_missing = [ref.seq for ref in pending.meta.coverage if ref.seq not in flow.delivered]
        if self.events is not None:
            self.events.record(now, "in_stream_failed", self.name, flow=flow.flow_id,
                               detail={"batch": pending.batch_id, "missing": still_missing})
        if self.detector_config.escalate_in_stream_failure and still_missing:
            self._nack(flow, still_missing, now, "escalated", escalated=True)

    # ------------------------------------------------------------------

    def report_stats(self, flow_id: str, window_start: int, window_end: int) -> DeliveryStats:
        """Delivery statistics for deliveries and NACKs in [window_start, window_end)."""
        flow = self._flow(flow_id)
        window = [d for d in flow.deliveries if window_start <= d.at < window_end]
        nacked = [n for t, n in flow.nack_log if window_start <= t < window_end]
        latencies = np.array([(d.at - d.sent_at) / 1000 for d in window], dtype=float)
        return DeliveryStats(
            flow_id=flow_id,
            window_start_us=window_start,
            window_end_us=window_end,
            delivered=len(window),
            p50_latency_ms=float(np.percentile(latencies, 50)) if len(latencies) else None,
            p95_latency_ms=float(np.percentile(latencies, 95)) if len(latencies) else None,
            losses=sum(nacked),
            recoveries=sum(1 for d in window if d.recovered),
            nacks=len(nacked),
            total_losses=flow.nacked_seqs,
            total_recoveries=sum(1 for d in flow.deliveries if d.recovered),
            total_nacks=flow.nacks,
        )
