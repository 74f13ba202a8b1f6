"""Wire records moved between endpoints, DCs and the simulator."""

from dataclasses import dataclass, replace
from enum import Enum
from typing import FrozenSet, Optional, Tuple

from .models import ServiceKind

HEADER_BYTES = 40
BURST_END = "burst_end"
HANDSHAKE = "handshake"


class PacketKind(str, Enum):
    DATA = "data"
    CODED = "coded"
    NACK = "nack"
    COOP_REQUEST = "coop_request"
    COOP_RESPONSE = "coop_response"
    RECOVERED = "recovered"


class CodingScope(str, Enum):
    CROSS = "cross"
    IN_STREAM = "in_stream"


@dataclass(frozen=True)
class SymbolRef:
    """One data packet represented in a coded packet."""
    flow_id: str
    seq: int
    symbol_len: int
    sent_at: int = 0

    @property
    def key(self) -> Tuple[str, int]:
        return self.flow_id, self.seq


@dataclass(frozen=True)
class CodedMeta:
    """Decoding contract carried by every coded packet.

    Data symbols take block positions 0..k_effective-1 in coverage order;
    this packet is parity number ``index`` (block position k_effective+index).
    """
    batch_id: str
    scope: CodingScope
    index: int
    k_effective: int
    m: int
    coverage: Tuple[SymbolRef, ...]

    def position_of(self, flow_id: str, seq: int) -> Optional[int]:
        for pos, ref in enumerate(self.coverage):
            if ref.flow_id == flow_id and ref.seq == seq:
                return pos
        return None

    def to_detail(self) -> dict:
        return {
            "batch": self.batch_id,
            "scope": self.scope.value,
            "index": self.index,
            "k": self.k_effective,
            "m": self.m,
            "cover": [[ref.flow_id, ref.seq] for ref in self.coverage],
        }


@dataclass
class Packet:
    kind: PacketKind
    flow_id: str
    seq: int = -1
    payload: bytes = b""
    sent_at: int = 0
    src: str = ""
    dst: str = ""
    service: Optional[ServiceKind] = None
    markers: FrozenSet[str] = frozenset()
    overlay: bool = False
    coded: Optional[CodedMeta] = None
    # NACK / cooperative fields
    seqs: Tuple[int, ...] = ()
    batch_id: Optional[str] = None
    requester: Optional[str] = None
    deadline: Optional[int] = None
    detected_at: Optional[int] = None
    escalated: bool = False
    # recovered deliveries: "cache", "cross" or "in_stream"
    via: Optional[str] = None

    @property
    def size(self) -> int:
        return HEADER_BYTES + len(self.payload)

    @property
    def key(self) -> Tuple[str, int]:
        return self.flow_id, self.seq

    def copy(self, **changes) -> "Packet":
        return replace(self, **changes)

    def detail(self) -> dict:
        """Event-log detail for an arrival of this packet."""
        if self.kind == PacketKind.CODED and self.coded is not None:
            out = self.coded.to_detail()
            if self.deadline is not None:
                out["deadline"] = self.deadline
            return out
        if self.kind == PacketKind.NACK:
            return {"seqs": list(self.seqs), "deadline": self.deadline, "escalated": self.escalated}
        if self.kind in (PacketKind.COOP_REQUEST, PacketKind.COOP_RESPONSE):
            return {"batch": self.batch_id, "seqs": list(self.seqs)} if self.seqs else {"batch": self.batch_id}
        if self.kind == PacketKind.RECOVERED:
            return {"via": self.via}
        return {"service": self.service.value if self.service else None, "overlay": self.overlay}
