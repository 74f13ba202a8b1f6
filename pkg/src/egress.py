"""Egress DC (DC2): packet cache, coded store and cooperative recovery."""

import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Deque, Dict, List, Optional, Set, Tuple

from . import codec
from .errors import CodecError
from .events import EventLog
from .packets import CodedMeta, CodingScope, Packet, PacketKind

logger = logging.getLogger(__name__)

Key = Tuple[str, int]
Transmit = Callable[[Packet, int], None]
Scheduler = Callable[[int, Callable[[], None]], None]


class NackOutcome(str, Enum):
    CACHE_HIT = "cache_hit"
    IN_STREAM = "in_stream"
    COOPERATIVE = "cooperative"
    DECODED = "decoded"
    PARKED = "parked"
    EXPIRED = "expired"


class FailureClass(str, Enum):
    NO_STATE = "no_state"
    INSUFFICIENT_SYMBOLS = "insufficient_symbols"
    DEADLINE = "deadline"


@dataclass
class CacheEntry:
    packet: Packet
    stored_at: int


class PacketCache:
    """Data packets by (flow, seq); entries older than ttl are never served and
    are dropped as newer packets come in."""

    def __init__(self, ttl: int):
        self.ttl = ttl
        self.entries: Dict[Key, CacheEntry] = {}
        self._order: Deque[Tuple[int, Key]] = deque()

    def put(self, pkt: Packet, now: int) -> None:
        self.purge(now)
        self.entries[pkt.key] = CacheEntry(pkt, now)
        self._order.append((now, pkt.key))

    def purge(self, now: int) -> None:
        while self._order and now - self._order[0][0] > self.ttl:
            stored_at, key = self._order.popleft()
            entry = self.entries.get(key)
            if entry is not None and entry.stored_at == stored_at:
                del self.entries[key]

    def get(self, key: Key, now: int) -> Optional[Packet]:
        entry = self.entries.get(key)
        if entry is None:
            return None
        if now - entry.stored_at > self.ttl:
            del self.entries[key]
            return None
        return entry.packet

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class InStreamBlock:
    meta: CodedMeta
    stored_at: int
    parities: Dict[int, Packet] = field(default_factory=dict)
    nacked: Set[int] = field(default_factory=set)
    sent: Set[int] = field(default_factory=set)


@dataclass
class PendingNack:
    flow_id: str
    seq: int
    requester: str
    deadline: int
    detected_at: Optional[int] = None
    escalated: bool = False
    resolved: bool = False
    waiting_on: str = ""  # "parked" or a batch id
    # answered with in-stream parities; only watches the cross batch
    passive: bool = False

    @property
    def key(self) -> Key:
        return self.flow_id, self.seq


@dataclass
class CrossBatch:
    meta: CodedMeta
    stored_at: int
    coded: Dict[int, Packet] = field(default_factory=dict)
    responses: Dict[Key, bytes] = field(default_factory=dict)
    decoded: Optional[Dict[Key, bytes]] = None
    # flows already asked for their symbol, and flows known to be missing it
    solicited: Set[str] = field(default_factory=set)
    missing_flows: Set[str] = field(default_factory=set)

    @property
    def symbols(self) -> int:
        return len(self.coded) + len(self.responses)


@dataclass
class RecoveryTicket:
    """Open cooperative recovery for one batch."""
    batch_id: str
    missing: Dict[Key, List[PendingNack]] = field(default_factory=dict)
    solicited: Set[str] = field(default_factory=set)

    @property
    def deadline(self) -> int:
        return max(e.deadline for entries in self.missing.values() for e in entries)

    def pending(self) -> List[PendingNack]:
        return [e for entries in self.missing.values() for e in entries if not e.resolved]


class CodedStore:
    """Cross-stream batches and in-stream blocks, each with a ttl.

    Expired batches and blocks are dropped, with their coverage index, as
    newer coded packets come in.
    """

    def __init__(self, ttl: int):
        self.ttl = ttl
        self.batches: Dict[str, CrossBatch] = {}
        self.blocks: Dict[str, InStreamBlock] = {}
        self._cross_index: Dict[Key, str] = {}
        self._block_index: Dict[Key, str] = {}
        self._order: Deque[Tuple[int, CodingScope, str]] = deque()

    def __len__(self) -> int:
        return len(self.batches) + len(self.blocks)

    def purge(self, now: int) -> None:
        while self._order and now - self._order[0][0] > self.ttl:
            _, scope, batch_id = self._order.popleft()
            if scope == CodingScope.CROSS:
                held, index = self.batches.pop(batch_id, None), self._cross_index
            else:
                held, index = self.blocks.pop(batch_id, None), self._block_index
            if held is None:
                continue
            for ref in held.meta.coverage:
                if index.get(ref.key) == batch_id:
                    del index[ref.key]

    def add(self, pkt: Packet, now: int) -> None:
        self.purge(now)
        meta = pkt.coded
        if meta.scope == CodingScope.CROSS:
            batch = self.batches.get(meta.batch_id)
            if batch is None:
                batch = self.batches[meta.batch_id] = CrossBatch(meta, now)
                self._order.append((now, meta.scope, meta.batch_id))
                for ref in meta.coverage:
                    self._cross_index[ref.key] = meta.batch_id
            elif batch.meta.coverage != meta.coverage:
                logger.warning(f"coded packet {meta.batch_id}#{meta.index} disagrees on coverage; ignored")
                return
            batch.coded[meta.index] = pkt
        else:
            block = self.blocks.get(meta.batch_id)
            if block is None:
                block = self.blocks[meta.batch_id] = InStreamBlock(meta, now)
                self._order.append((now, meta.scope, meta.batch_id))
                for ref in meta.coverage:
                    self._block_index[ref.key] = meta.batch_id
            elif block.meta.coverage != meta.coverage:
                logger.warning(f"in-stream packet {meta.batch_id}#{meta.index} disagrees on coverage; ignored")
                return
            block.parities[meta.index] = pkt

    def batch_for(self, key: Key, now: int) -> Optional[CrossBatch]:
        batch = self.batches.get(self._cross_index.get(key, ""))
        if batch is None or now - batch.stored_at > self.ttl:
            return None
        return batch

    def block_for(self, key: Key, now: int) -> Optional[InStreamBlock]:
        block = self.blocks.get(self._block_index.get(key, ""))
        if block is None or now - block.stored_at > self.ttl:
            return None
        return block

    def batch(self, batch_id: str, now: int) -> Optional[CrossBatch]:
        batch = self.batches.get(batch_id)
        if batch is None or now - batch.stored_at > self.ttl:
            return None
        return batch


class EgressDC:
    """DC2 service: store, answer NACKs, run cooperative recovery.

    ``receiver_of(flow_id)`` names the host to solicit for a flow's data.
    """

    def __init__(self, name: str, ttl: int, transmit: Transmit, schedule: Scheduler,
                 receiver_of: Callable[[str], str], events: Optional[EventLog] = None):
        self.name = name
        self.ttl = ttl
        self.cache = PacketCache(ttl)
        self.store_ = CodedStore(ttl)
        self.transmit = transmit
        self.schedule = schedule
        self.receiver_of = receiver_of
        self.events = events
        self.tickets: Dict[str, RecoveryTicket] = {}
        self.parked: Dict[Key, List[PendingNack]] = defaultdict(list)
        self.failures: Dict[str, int] = defaultdict(int)

    # ------------------------------------------------------------------
    # store

    def store(self, pkt: Packet, now: int) -> None:
        """Cache a data packet or file a coded one, then retry parked NACKs it may answer."""
        if pkt.kind == PacketKind.DATA:
            self.cache.put(pkt, now)
            self._retry_parked([pkt.key], now)
        elif pkt.kind == PacketKind.CODED and pkt.coded is not None:
            self.store_.add(pkt, now)
            keys = [ref.key for ref in pkt.coded.coverage]
            self._retry_parked(keys, now)
            if pkt.coded.scope == CodingScope.CROSS and pkt.coded.batch_id in self.tickets:
                self._try_decode(pkt.coded.batch_id, now)

    # ------------------------------------------------------------------
    # NACKs

    def handle_nack(self, nack: Packet, now: int) -> Dict[int, NackOutcome]:
        deadline = max(now + 1, nack.deadline if nack.deadline is not None else now + 1)
        entries = [
            PendingNack(nack.flow_id, seq, nack.requester or nack.src, deadline,
                        nack.detected_at, nack.escalated)
            for seq in nack.seqs
        ]
        # Count every seq of this NACK against its in-stream block before deciding.
        for entry in entries:
            if not entry.escalated:
                block = self.store_.block_for(entry.key, now)
                if block is not None:
                    block.nacked.add(entry.seq)
        return {entry.seq: self._resolve(entry, now) for entry in entries}

    def _resolve(self, entry: PendingNack, now: int) -> NackOutcome:
        if now > entry.deadline:
            self._fail(entry, FailureClass.DEADLINE, now)
            return NackOutcome.EXPIRED

        cached = self.cache.get(entry.key, now)
        if cached is not None:
            self._send_recovered(entry, cached.payload, cached.sent_at, "cache", now)
            return NackOutcome.CACHE_HIT

        if not entry.escalated and not entry.passive:
            block = self.store_.block_for(entry.key, now)
            if block is not None:
                block.nacked.add(entry.seq)
                if len(block.nacked) <= len(block.parities):
                    self._send_parities(block, entry, now)
                    entry.passive = True

        batch = self.store_.batch_for(entry.key, now)
        if batch is not None:
            if batch.decoded is not None:
                ref = batch.meta.coverage[batch.meta.position_of(*entry.key)]
                self._send_recovered(entry, batch.decoded[entry.key], ref.sent_at, "cross", now)
                return NackOutcome.DECODED
            self._join_ticket(batch, entry, now)
            if self._try_decode(batch.meta.batch_id, now):
                return NackOutcome.DECODED
            return NackOutcome.IN_STREAM if entry.passive else NackOutcome.COOPERATIVE

        entry.waiting_on = "parked"
        self.parked[entry.key].append(entry)
        self.schedule(entry.deadline + 1, lambda: self._expire(entry))
        return NackOutcome.IN_STREAM if entry.passive else NackOutcome.PARKED

    def _retry_parked(self, keys: List[Key], now: int) -> None:
        for key in keys:
            waiting = self.parked.pop(key, None)
            if not waiting:
                continue
            for entry in waiting:
                if not entry.resolved:
                    outcome = self._resolve(entry, now)
                    logger.debug(f"{self.name}: parked NACK {key} -> {outcome.value}")

    # ------------------------------------------------------------------
    # cooperative recovery

    def _join_ticket(self, batch: CrossBatch, entry: PendingNack, now: int) -> None:
        batch_id = batch.meta.batch_id
        ticket = self.tickets.get(batch_id)
        if ticket is None:
            ticket = self.tickets[batch_id] = RecoveryTicket(batch_id)
        ticket.missing.setdefault(entry.key, []).append(entry)
        entry.waiting_on = batch_id
        batch.missing_flows.add(entry.flow_id)
        self.schedule(entry.deadline + 1, lambda: self._expire(entry))
        if entry.passive:
            return

        for ref in batch.meta.coverage:
            if ref.flow_id in batch.solicited or ref.flow_id in batch.missing_flows:
                continue
            batch.solicited.add(ref.flow_id)
            ticket.solicited.add(ref.flow_id)
            request = Packet(
                kind=PacketKind.COOP_REQUEST,
                flow_id=ref.flow_id,
                seqs=(ref.seq,),
                src=self.name,
                dst=self.receiver_of(ref.flow_id),
                batch_id=batch_id,
                requester=self.name,
                deadline=entry.deadline,
            )
            if self.events is not None:
                self.events.record(now, "coop_request", self.name, flow=ref.flow_id, seq=ref.seq,
                                   kind=PacketKind.COOP_REQUEST.value, peer=request.dst,
                                   detail={"batch": batch_id})
            self.transmit(request, now)

    def handle_coop_response(self, resp: Packet, now: int) -> List[Packet]:
        """Record a helper's data symbol; decode once enough symbols are present."""
        batch = self.store_.batch(resp.batch_id or "", now)
        if batch is None:
            logger.warning(f"{self.name}: response for unknown batch {resp.batch_id} dropped")
            return []
        if batch.decoded is not None:
            logger.debug(f"{self.name}: late response for decoded batch {resp.batch_id} ignored")
            return []
        if batch.meta.position_of(resp.flow_id, resp.seq) is None:
            logger.warning(f"{self.name}: response {resp.key} not covered by batch {resp.batch_id}")
            return []
        batch.responses[resp.key] = resp.payload
        return self._try_decode(batch.meta.batch_id, now)

    def _try_decode(self, batch_id: str, now: int) -> List[Packet]:
        ticket = self.tickets.get(batch_id)
        batch = self.store_.batch(batch_id, now)
        if ticket is None or batch is None:
            return []
        for stale in [e for e in ticket.pending() if e.deadline < now]:
            self._fail(stale, FailureClass.DEADLINE, now)
        live = ticket.pending()
        if not live:
            del self.tickets[batch_id]
            return []
        if batch.symbols < batch.meta.k_effective:
            return []

        meta = batch.meta
        present: Dict[int, bytes] = {}
        symbol_len = max((ref.symbol_len for ref in meta.coverage), default=0)
        for key, payload in batch.responses.items():
            present[meta.position_of(*key)] = payload.ljust(symbol_len, b"\x00")
        for index, pkt in batch.coded.items():
            present[meta.k_effective + index] = pkt.payload
        try:
            data = codec.decode(codec.SymbolBlock.from_present(meta.k_effective, meta.m, present, symbol_len))
        except CodecError as exc:
            logger.warning(f"{self.name}: decode of {batch_id} failed: {exc}")
            return []
        batch.decoded = {
            ref.key: codec.trim(data[pos], ref.symbol_len) for pos, ref in enumerate(meta.coverage)
        }

        sent = []
        for entry in live:
            ref = meta.coverage[meta.position_of(*entry.key)]
            sent.append(self._send_recovered(entry, batch.decoded[entry.key], ref.sent_at, "cross", now))
        del self.tickets[batch_id]
        return sent

    # ------------------------------------------------------------------

    def _send_recovered(self, entry: PendingNack, payload: bytes, sent_at: int,
                        method: str, now: int) -> Packet:
        entry.resolved = True
        pkt = Packet(
            kind=PacketKind.RECOVERED,
            flow_id=entry.flow_id,
            seq=entry.seq,
            payload=payload,
            sent_at=sent_at,
            src=self.name,
            dst=entry.requester,
            via=method,
        )
        if self.events is not None:
            self.events.record(now, "recovery_sent", self.name, flow=entry.flow_id, seq=entry.seq,
                               kind=PacketKind.RECOVERED.value, peer=entry.requester,
                               detail={"method": method})
        self.transmit(pkt, now)
        return pkt

    def _send_parities(self, block: InStreamBlock, entry: PendingNack, now: int) -> None:
        for index in sorted(block.parities):
            if index in block.sent:
                continue
            block.sent.add(index)
            parity = block.parities[index].copy(src=self.name, dst=entry.requester, deadline=entry.deadline)
            if self.events is not None:
                self.events.record(now, "in_stream_sent", self.name, flow=entry.flow_id, seq=entry.seq,
                                   kind=PacketKind.CODED.value, peer=entry.requester,
                                   detail={"batch": block.meta.batch_id, "index": index})
            self.transmit(parity, now)

    def _expire(self, entry: PendingNack) -> None:
        if entry.resolved:
            return
        now = entry.deadline + 1
        if entry.waiting_on == "parked":
            remaining = [e for e in self.parked.get(entry.key, []) if e is not entry]
            if remaining:
                self.parked[entry.key] = remaining
            else:
                self.parked.pop(entry.key, None)
            self._fail(entry, FailureClass.NO_STATE, now)
            return
        self._fail(entry, FailureClass.INSUFFICIENT_SYMBOLS, now)
        ticket = self.tickets.get(entry.waiting_on)
        if ticket is not None and not ticket.pending():
            del self.tickets[entry.waiting_on]

    def _fail(self, entry: PendingNack, reason: FailureClass, now: int) -> None:
        entry.resolved = True
        if entry.passive:
            return
        self.failures[reason.value] += 1
        logger.debug(f"{self.name}: recovery of {entry.key} failed ({reason.value})")
        if self.events is not None:
            self.events.record(now, "recovery_failed", self.name, flow=entry.flow_id, seq=entry.seq,
                               peer=entry.requester, detail={"reason": reason.value})
