"""Ingress DC (DC1): in-stream and cross-stream coding queues."""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from . import codec
from .errors import DuplicateFlowError, UnknownFlowError
from .events import EventLog
from .models import CodingParams, ServiceKind
from .packets import CodedMeta, CodingScope, Packet, PacketKind, SymbolRef

logger = logging.getLogger(__name__)

TimerScheduler = Callable[[str, int], None]


@dataclass
class CrossStreamQueue:
    queue_id: str
    destination_dc: str
    capacity: int
    slots: "OrderedDict[str, Packet]" = field(default_factory=OrderedDict)
    timer_deadline: Optional[int] = None

    def contains(self, flow_id: str) -> bool:
        return flow_id in self.slots

    def is_full(self) -> bool:
        return len(self.slots) >= self.capacity

    def take(self) -> List[Packet]:
        packets = list(self.slots.values())
        self.slots.clear()
        self.timer_deadline = None
        return packets


@dataclass
class InStreamQueue:
    queue_id: str
    flow_id: str
    destination_dc: str
    capacity: int
    parities: int
    slots: List[Packet] = field(default_factory=list)
    timer_deadline: Optional[int] = None

    def is_full(self) -> bool:
        return len(self.slots) >= self.capacity

    def take(self) -> List[Packet]:
        packets = self.slots
        self.slots = []
        self.timer_deadline = None
        return packets


@dataclass
class FlowGroup:
    """Flows sharing one destination DC, split into subgroups of at most k."""
    destination_dc: str
    subgroups: List[List[str]] = field(default_factory=list)

    @property
    def member_flows(self) -> List[str]:
        return [f for sub in self.subgroups for f in sub]


@dataclass(frozen=True)
class JournalEntry:
    time: int
    action: str  # emit | evict | discard
    queue_id: str
    scope: CodingScope
    coverage: Tuple[Tuple[str, int], ...]
    coded: int


class IngressDC:
    """DC1 coding service.

    ``schedule_timer(queue_id, deadline)`` must later call
    ``on_queue_timer(queue_id, deadline)``; stale timers are ignored.
    """

    def __init__(self, name: str, params: CodingParams,
                 schedule_timer: Optional[TimerScheduler] = None,
                 events: Optional[EventLog] = None):
        self.name = name
        self.params = params
        self.schedule_timer = schedule_timer
        self.events = events
        self.groups: Dict[str, FlowGroup] = {}
        self.cross_queues: Dict[str, CrossStreamQueue] = {}
        self.in_stream_queues: Dict[str, InStreamQueue] = {}
        self.journal: List[JournalEntry] = []
        self._flow_queues: Dict[str, List[str]] = {}
        self._rr: Dict[str, int] = {}
        self._flow_dest: Dict[str, str] = {}
        self._batches = 0

    # ------------------------------------------------------------------
    # membership

    def assign_flow(self, flow_id: str, destination_dc: str) -> Tuple[str, int]:
        """Join the flow to a subgroup of its destination group; returns (dc, subgroup index)."""
        if flow_id in self._flow_dest:
            raise DuplicateFlowError(flow_id)
        group = self.groups.setdefault(destination_dc, FlowGroup(destination_dc))
        for index, sub in enumerate(group.subgroups):
            if len(sub) < self.params.k:
                break
        else:
            group.subgroups.append([])
            index = len(group.subgroups) - 1
            for qi in range(self.params.queues_per_group):
                qid = f"x:{destination_dc}:{index}:{qi}"
                self.cross_queues[qid] = CrossStreamQueue(qid, destination_dc, self.params.k)
        group.subgroups[index].append(flow_id)

        self._flow_dest[flow_id] = destination_dc
        self._flow_queues[flow_id] = [
            f"x:{destination_dc}:{index}:{qi}" for qi in range(self.params.queues_per_group)
        ]
        self._rr[flow_id] = 0
        block, parities = self.params.in_stream_geometry
        if block:
            qid = f"i:{flow_id}"
            self.in_stream_queues[qid] = InStreamQueue(qid, flow_id, destination_dc, block, parities)
        logger.debug(f"{self.name}: flow {flow_id} -> {destination_dc} subgroup {index}")
        return destination_dc, index

    def destination_of(self, flow_id: str) -> str:
        try:
            return self._flow_dest[flow_id]
        except KeyError:
            raise UnknownFlowError(flow_id) from None

    # ------------------------------------------------------------------
    # packet path

    def dc1_process(self, pkt: Packet, flow_id: str, now: int) -> List[Packet]:
        """Queue one data packet; return coded packets to send toward DC2."""
        dest = self.destination_of(flow_id)
        out: List[Packet] = []

        in_q = self.in_stream_queues.get(f"i:{flow_id}")
        if in_q is not None:
            self._push(in_q, pkt, now)
            if in_q.is_full():
                out += self._flush(in_q, now)

        if not self.params.cross_enabled:
            return out

        q = self.cross_queues[self._next_queue(flow_id)]
        initial = q
        while q.contains(flow_id):
            q = self.cross_queues[self._next_queue(flow_id)]
            if q is initial:
                if len(q.slots) > 1:
                    out += self._flush(q, now)
                else:
                    evicted = q.take()
                    self._journal(now, "evict", q.queue_id, CodingScope.CROSS, evicted, 0)
                break

        self._push(q, pkt, now)
        if q.is_full():
            out += self._flush(q, now)
        return out

    def on_queue_timer(self, queue_id: str, now: int) -> List[Packet]:
        """Flush a queue whose timer deadline is ``now``; stale or empty timers do nothing."""
        q = self.cross_queues.get(queue_id) or self.in_stream_queues.get(queue_id)
        if q is None or q.timer_deadline != now or not q.slots:
            return []
        if isinstance(q, CrossStreamQueue) and len(q.slots) == 1:
            discarded = q.take()
            self._journal(now, "discard", queue_id, CodingScope.CROSS, discarded, 0)
            return []
        return self._flush(q, now)

    # ------------------------------------------------------------------

    def _next_queue(self, flow_id: str) -> str:
        queues = self._flow_queues[flow_id]
        index = self._rr[flow_id]
        self._rr[flow_id] = (index + 1) % len(queues)
        return queues[index]

    def _push(self, q, pkt: Packet, now: int) -> None:
        was_empty = not q.slots
        if isinstance(q, CrossStreamQueue):
            q.slots[pkt.flow_id] = pkt
        else:
            q.slots.append(pkt)
        if was_empty:
            timeout = (self.params.queue_timeout_us if isinstance(q, CrossStreamQueue)
                       else self.params.in_stream_timeout_us)
            q.timer_deadline = now + timeout
            if self.schedule_timer is not None:
                self.schedule_timer(q.queue_id, q.timer_deadline)

    def _flush(self, q, now: int) -> List[Packet]:
        packets = q.take()
        if isinstance(q, CrossStreamQueue):
            scope, m, flow_id = CodingScope.CROSS, self.params.m_cross, ""
        else:
            scope, m, flow_id = CodingScope.IN_STREAM, q.parities, q.flow_id
        coded = self._encode(packets, scope, m, q.destination_dc, flow_id, now)
        self._journal(now, "emit", q.queue_id, scope, packets, len(coded))
        return coded

    def _encode(self, packets: List[Packet], scope: CodingScope, m: int,
                dest: str, flow_id: str, now: int) -> List[Packet]:
        self._batches += 1
        batch_id = f"{self.name}/{self._batches}"
        padded, _ = codec.pad_symbols([p.payload for p in packets])
        parities = codec.encode(padded, m)
        coverage = tuple(SymbolRef(p.flow_id, p.seq, len(p.payload), p.sent_at) for p in packets)
        coded = [
            Packet(
                kind=PacketKind.CODED,
                flow_id=flow_id,
                payload=parity,
                sent_at=now,
                src=self.name,
                dst=dest,
                service=ServiceKind.CODING,
                coded=CodedMeta(batch_id, scope, i, len(packets), m, coverage),
            )
            for i, parity in enumerate(parities)
        ]
        if self.events is not None:
            self.events.record(now, "coded_emit", self.name, flow=flow_id, kind=scope.value,
                               peer=dest, detail=coded[0].coded.to_detail())
        return coded

    def _journal(self, now: int, action: str, queue_id: str, scope: CodingScope,
                 packets: List[Packet], coded: int) -> None:
        entry = JournalEntry(now, action, queue_id, scope, tuple(p.key for p in packets), coded)
        self.journal.append(entry)
        if action != "emit":
            logger.debug(f"{self.name}: {action} {entry.coverage} from {queue_id}")
            if self.events is not None:
                for p in packets:
                    self.events.record(now, action, self.name, flow=p.flow_id, seq=p.seq,
                                       kind=scope.value, detail={"queue": queue_id})
