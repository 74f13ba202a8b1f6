"""Deterministic discrete-event network: links, loss models and traffic generators.

Virtual time is integer microseconds on a simpy Environment. Events at the
same instant fire in scheduling order.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
import simpy

from .errors import SimulationError, UnknownLinkError
from .events import EventLog
from .models import (
    BernoulliLoss,
    BurstChainLoss,
    CbrPattern,
    CompositeLoss,
    LinkConfig,
    NoJitter,
    NormalJitter,
    OnOffPattern,
    OutageLoss,
    UniformJitter,
    ms_to_us,
)
from .packets import BURST_END, Packet

logger = logging.getLogger(__name__)

Handler = Callable[[Packet, int, str], None]


# ---------------------------------------------------------------------------
# Loss models

class LossModel:
    def drop(self, now: int) -> bool:
        raise NotImplementedError


class NoLoss(LossModel):
    def drop(self, now: int) -> bool:
        return False


class Bernoulli(LossModel):
    def __init__(self, p: float, rng: np.random.Generator):
        self.p = p
        self.rng = rng

    def drop(self, now: int) -> bool:
        return self.p > 0 and self.rng.random() < self.p


class BurstChain(LossModel):
    """Drops with p_first after a success and p_subsequent after a loss."""

    def __init__(self, p_first: float, p_subsequent: float, rng: np.random.Generator):
        self.p_first = p_first
        self.p_subsequent = p_subsequent
        self.rng = rng
        self.in_loss = False

    def drop(self, now: int) -> bool:
        p = self.p_subsequent if self.in_loss else self.p_first
        self.in_loss = bool(self.rng.random() < p)
        return self.in_loss


class OutageSchedule(LossModel):
    """Drops everything sent inside any [start, end) window (microseconds)."""

    def __init__(self, intervals: Iterable[Tuple[int, int]]):
        self.intervals = sorted(intervals)

    def drop(self, now: int) -> bool:
        return any(start <= now < end for start, end in self.intervals)


class Composite(LossModel):
    """Consults every member model; drops if any of them drops."""

    def __init__(self, models: List[LossModel]):
        self.models = models

    def drop(self, now: int) -> bool:
        dropped = False
        for model in self.models:
            dropped = model.drop(now) or dropped
        return dropped


def build_loss(spec, rng: np.random.Generator) -> LossModel:
    if spec is None:
        return NoLoss()
    if isinstance(spec, BernoulliLoss):
        return Bernoulli(spec.p, rng)
    if isinstance(spec, BurstChainLoss):
        return BurstChain(spec.p_first, spec.p_subsequent, rng)
    if isinstance(spec, OutageLoss):
        return OutageSchedule((ms_to_us(a), ms_to_us(b)) for a, b in spec.intervals_ms)
    if isinstance(spec, CompositeLoss):
        return Composite([build_loss(m, rng) for m in spec.models])
    raise TypeError(f"unsupported loss spec {spec!r}")


# ---------------------------------------------------------------------------
# Links

class Jitter:
    def __init__(self, spec, rng: np.random.Generator):
        self.spec = spec or NoJitter()
        self.rng = rng

    def sample(self) -> int:
        if isinstance(self.spec, UniformJitter) and self.spec.j_ms > 0:
            return ms_to_us(self.rng.uniform(-self.spec.j_ms, self.spec.j_ms))
        if isinstance(self.spec, NormalJitter) and self.spec.sigma_ms > 0:
            return ms_to_us(self.rng.normal(0.0, self.spec.sigma_ms))
        return 0


@dataclass
class Link:
    src: str
    dst: str
    base_latency: int
    jitter: Jitter
    loss: LossModel
    bandwidth_bps: Optional[float] = None
    busy_until: int = 0
    packets: int = 0
    drops: int = 0
    bytes_by_service: Dict[str, int] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return f"{self.src}->{self.dst}"

    @property
    def bytes(self) -> int:
        return sum(self.bytes_by_service.values())


class Network:
    """Nodes, links and the virtual clock."""

    def __init__(self, seed: int = 0, events: Optional[EventLog] = None):
        self.env = simpy.Environment()
        self.seed = seed
        self.events = events if events is not None else EventLog()
        self.links: Dict[Tuple[str, str], Link] = {}
        self.handlers: Dict[str, Handler] = {}
        self._link_streams = 0

    @property
    def now(self) -> int:
        return int(self.env.now)

    def _rng(self) -> np.random.Generator:
        self._link_streams += 1
        return np.random.default_rng([self.seed, self._link_streams])

    def rng(self, *stream: int) -> np.random.Generator:
        """Independent generator for non-link randomness (e.g. OFF durations)."""
        return np.random.default_rng([self.seed, 1_000_000, *stream])

    def add_link(self, config: LinkConfig) -> List[Link]:
        created = [self._make_link(config.src, config.dst, config.latency_ms, config.jitter, config.loss,
                                   config.bandwidth_mbps)]
        if config.bidirectional:
            latency = config.reverse_latency_ms if config.reverse_latency_ms is not None else config.latency_ms
            loss = config.reverse_loss if config.reverse_loss is not None else config.loss
            created.append(self._make_link(config.dst, config.src, latency, config.jitter, loss,
                                           config.bandwidth_mbps))
        return created

    def _make_link(self, src, dst, latency_ms, jitter, loss, bandwidth_mbps) -> Link:
        rng = self._rng()
        link = Link(src, dst, ms_to_us(latency_ms), Jitter(jitter, rng), build_loss(loss, rng),
                    bandwidth_mbps * 1e6 if bandwidth_mbps else None)
        self.links[(src, dst)] = link
        return link

    def attach(self, node: str, handler: Handler) -> None:
        self.handlers[node] = handler

    # ------------------------------------------------------------------

    def call_at(self, t: int, fn: Callable[[], None]) -> None:
        delay = t - self.now
        if delay < 0:
            raise SimulationError(f"cannot schedule at {t}, clock is already {self.now}")
        timeout = self.env.timeout(delay)
        timeout.callbacks.append(lambda _event: fn())

    def call_later(self, delay: int, fn: Callable[[], None]) -> None:
        self.call_at(self.now + delay, fn)

    def transmit(self, src: str, dst: str, pkt: Packet, now: Optional[int] = None) -> Optional[int]:
        """Put a packet on src->dst; returns its arrival time, or None when dropped."""
        now = self.now if now is None else now
        if src == dst:
            self.call_at(now, lambda: self._arrive(dst, pkt, src))
            return now
        link = self.links.get((src, dst))
        if link is None:
            raise UnknownLinkError(src, dst)

        link.packets += 1
        service = pkt.service.value if pkt.service else "control"
        link.bytes_by_service[service] = link.bytes_by_service.get(service, 0) + pkt.size
        self.events.record(now, "transmit", src, flow=pkt.flow_id, seq=pkt.seq, kind=pkt.kind.value, peer=dst)

        if link.loss.drop(now):
            link.drops += 1
            self.events.record(now, "drop", src, flow=pkt.flow_id, seq=pkt.seq, kind=pkt.kind.value,
                               peer=dst, detail={"overlay": pkt.overlay} if pkt.overlay else None)
            return None

        start = now
        if link.bandwidth_bps:
            start = max(now, link.busy_until)
            link.busy_until = start + int(np.ceil(pkt.size * 8 / link.bandwidth_bps * 1e6))
            start = link.busy_until
        arrival = start + max(0, link.base_latency + link.jitter.sample())
        self.call_at(arrival, lambda: self._arrive(dst, pkt, src))
        return arrival

    def _arrive(self, node: str, pkt: Packet, src: str) -> None:
        self.events.record(self.now, "arrive", node, flow=pkt.flow_id, seq=pkt.seq, kind=pkt.kind.value,
                           peer=src, detail=pkt.detail())
        handler = self.handlers.get(node)
        if handler is None:
            logger.warning(f"packet for unattached node {node} dropped")
            return
        handler(pkt, self.now, src)

    def run_until(self, t_end: int) -> EventLog:
        """Process every event with time <= t_end."""
        if t_end >= self.now:
            self.env.run(until=t_end + 1)
        return self.events

    # ------------------------------------------------------------------
    # traffic

    def traffic_generator(self, pattern, emit: Callable[[int, frozenset], None],
                          stop_at: int, start_event: Optional["SyncGroup"] = None,
                          rng: Optional[np.random.Generator] = None):
        """Start a process calling ``emit(now, markers)`` per packet of the pattern."""
        if isinstance(pattern, CbrPattern):
            return self.env.process(self._cbr(pattern, emit, stop_at))
        if isinstance(pattern, OnOffPattern):
            group = start_event or SyncGroup(self, pattern, rng or self.rng(0), stop_at)
            return self.env.process(self._onoff(pattern, emit, stop_at, group))
        raise TypeError(f"unsupported traffic pattern {pattern!r}")

    def _cbr(self, pattern: CbrPattern, emit, stop_at: int):
        period = ms_to_us(pattern.period_ms)
        t = ms_to_us(pattern.start_ms)
        yield self.env.timeout(t)
        sent = 0
        while t < stop_at and (pattern.count is None or sent < pattern.count):
            sent += 1
            last = t + period >= stop_at or (pattern.count is not None and sent == pattern.count)
            emit(t, frozenset({BURST_END}) if last else frozenset())
            t += period
            yield self.env.timeout(period)

    def _onoff(self, pattern: OnOffPattern, emit, stop_at: int, group: "SyncGroup"):
        period = ms_to_us(pattern.period_ms)
        on = ms_to_us(pattern.on_ms)
        while True:
            yield group.next_on
            start = self.now
            end = min(start + on, stop_at)
            t = start
            while t < end:
                last = t + period >= end
                emit(t, frozenset({BURST_END}) if last else frozenset())
                t += period
                if t < end:
                    yield self.env.timeout(period)
            if end >= stop_at:
                return


class SyncGroup:
    """Shared ON-start events for flows sending in loose synchrony.

    ON periods start at ``start_ms`` and after each exponential OFF period.
    """

    def __init__(self, net: Network, pattern: OnOffPattern, rng: np.random.Generator, stop_at: int):
        self.net = net
        self.pattern = pattern
        self.rng = rng
        self.stop_at = stop_at
        self.next_on = net.env.event()
        self.off_durations: List[int] = []
        net.env.process(self._run())

    def _run(self):
        env = self.net.env
        yield env.timeout(ms_to_us(self.pattern.start_ms))
        on = ms_to_us(self.pattern.on_ms)
        while self.net.now < self.stop_at:
            fired, self.next_on = self.next_on, env.event()
            fired.succeed()
            yield env.timeout(on)
            off = max(1, ms_to_us(self.rng.exponential(self.pattern.off_mean_ms)))
            self.off_durations.append(off)
            yield env.timeout(off)
