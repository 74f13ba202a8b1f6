"""Scenario loading, simulation wiring and artifact output."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

from pydantic import ValidationError

from .control_plane import Registry
from .egress import EgressDC
from .endpoint import Receiver, Sender
from .errors import ScenarioError
from .events import EventLog
from .ingress import IngressDC
from .models import (
    CbrPattern,
    CodingParams,
    DetectorConfig,
    DuplicationPolicy,
    FlowConfig,
    HostConfig,
    LinkConfig,
    NoJitter,
    PathLatencies,
    ScenarioConfig,
    ServiceKind,
    ServiceSelection,
    StorageConfig,
    TopologyConfig,
    ms_to_us,
)
from .packets import HANDSHAKE, Packet, PacketKind
from .simnet import Network, SyncGroup

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# loading

def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    """Read and validate a JSON scenario file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ScenarioError([f"cannot read file: {exc}"], str(path)) from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"line {exc.lineno}: {exc.msg}"], str(path)) from exc
    return parse_scenario(raw, str(path))


def parse_scenario(raw: dict, source: str = "") -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            where = ".".join(str(part) for part in err["loc"]) or "<root>"
            problems.append(f"{where}: {err['msg']}")
        raise ScenarioError(problems, source) from exc


# ---------------------------------------------------------------------------
# per-flow planning

@dataclass
class FlowPlan:
    config: FlowConfig
    latencies: PathLatencies
    ingress_dc: Optional[str]
    egress_dc: Optional[str]
    rtt: int
    recovery_budget: int
    retention: int


def _one_way(config: ScenarioConfig, src: str, dst: str) -> Optional[float]:
    if src == dst:
        return 0.0
    return config.one_way_ms(src, dst)


def flow_latencies(config: ScenarioConfig, flow: FlowConfig) -> PathLatencies:
    """Latency symbols of one flow, read off the configured topology."""
    src_dc = config.host(flow.source).dc
    dst_dc = config.host(flow.destination).dc
    delta_s = _one_way(config, flow.source, src_dc) if src_dc else 0.0
    delta_r = _one_way(config, dst_dc, flow.destination) if dst_dc else 0.0
    x = _one_way(config, src_dc, dst_dc) if src_dc and dst_dc else 0.0
    if None in (delta_s, delta_r, x):
        missing = [name for name, v in (("sender-DC", delta_s), ("DC-receiver", delta_r), ("inter-DC", x))
                   if v is None]
        raise ScenarioError([f"flows.{flow.flow_id}: no {', '.join(missing)} link"])
    y = _one_way(config, flow.source, flow.destination)
    if y is None:
        y = delta_s + x + delta_r
    helpers = [
        _one_way(config, dst_dc, other.destination)
        for other in config.flows
        if dst_dc and other.flow_id != flow.flow_id and other.destination != flow.destination
        and config.host(other.destination).dc == dst_dc
    ]
    helpers = [h for h in helpers if h is not None]
    return PathLatencies(delta_s_dc1=delta_s, delta_r_dc2=delta_r, x=x, y=y,
                         delta_r_prime_dc2=max(helpers, default=0.0), delta_cap=0.0)


def plan_flows(config: ScenarioConfig) -> Dict[str, FlowPlan]:
    plans = {}
    for flow in config.flows:
        lat = flow_latencies(config, flow)
        rtt = max(1, ms_to_us(lat.rtt_direct))
        retention = (ms_to_us(config.storage.replay_retention_ms)
                     if config.storage.replay_retention_ms else 2 * rtt)
        plans[flow.flow_id] = FlowPlan(
            config=flow,
            latencies=lat,
            ingress_dc=config.host(flow.source).dc,
            egress_dc=config.host(flow.destination).dc,
            rtt=rtt,
            recovery_budget=max(1, rtt - ms_to_us(lat.delta_r_dc2)),
            retention=retention,
        )
    return plans


def dc_ttls(config: ScenarioConfig, plans: Dict[str, FlowPlan]) -> Dict[str, int]:
    """Cache/store ttl per DC: configured, or twice the largest RTT of flows leaving there."""
    fallback = max((p.rtt for p in plans.values()), default=1_000_000)
    ttls = {}
    for dc in config.topology.dcs:
        if config.storage.ttl_ms:
            ttls[dc] = ms_to_us(config.storage.ttl_ms)
        else:
            rtts = [p.rtt for p in plans.values() if p.egress_dc == dc]
            ttls[dc] = 2 * max(rtts, default=fallback)
    return ttls


# ---------------------------------------------------------------------------
# nodes

class EndHost:
    """An end host: sender for its outgoing flows, receiver for incoming ones."""

    def __init__(self, name: str, net: Network, detector: DetectorConfig, events: EventLog):
        self.name = name
        self.net = net
        self.sender = Sender(name, transmit=self._send_hop, events=events)
        self.receiver = Receiver(name, transmit=self._send, schedule=net.call_at,
                                 detector=detector, events=events)

    def _send_hop(self, next_hop: str, pkt: Packet, now: int) -> None:
        self.net.transmit(self.name, next_hop, pkt, now)

    def _send(self, pkt: Packet, now: int) -> None:
        self.net.transmit(self.name, pkt.dst, pkt, now)

    def handle(self, pkt: Packet, now: int, src: str) -> None:
        self.receiver.on_receive(pkt, now)


class DataCenterHost:
    """A DC running both the ingress coder and the egress store."""

    def __init__(self, name: str, net: Network, registry: Registry, params: CodingParams,
                 ttl: int, events: EventLog):
        self.name = name
        self.net = net
        self.registry = registry
        self.ingress = IngressDC(name, params, schedule_timer=self._schedule_queue_timer, events=events)
        self.egress = EgressDC(name, ttl, transmit=self._send, schedule=net.call_at,
                               receiver_of=registry.receiver_of, events=events)

    def _send(self, pkt: Packet, now: int) -> None:
        self.net.transmit(self.name, pkt.dst, pkt, now)

    def _schedule_queue_timer(self, queue_id: str, deadline: int) -> None:
        def fire():
            for coded in self.ingress.on_queue_timer(queue_id, deadline):
                self._send(coded, deadline)
        self.net.call_at(deadline, fire)

    def handle(self, pkt: Packet, now: int, src: str) -> None:
        if pkt.kind == PacketKind.DATA:
            self._handle_data(pkt, now)
        elif pkt.kind == PacketKind.CODED:
            self.egress.store(pkt, now)
        elif pkt.kind == PacketKind.NACK:
            self.egress.handle_nack(pkt, now)
        elif pkt.kind == PacketKind.COOP_RESPONSE:
            self.egress.handle_coop_response(pkt, now)
        else:
            logger.warning(f"{self.name}: unexpected {pkt.kind.value} packet from {src}")

    def _handle_data(self, pkt: Packet, now: int) -> None:
        record = self.registry.lookup(pkt.flow_id)
        at_egress = self.name == record.egress_dc
        if pkt.service == ServiceKind.FORWARDING:
            next_hop = record.destination if at_egress else record.egress_dc
            self.net.transmit(self.name, next_hop, pkt, now)
        elif pkt.service == ServiceKind.CACHING:
            if at_egress:
                self.egress.store(pkt, now)
            else:
                self.net.transmit(self.name, record.egress_dc, pkt, now)
        elif pkt.service == ServiceKind.CODING and self.name == record.ingress_dc:
            for coded in self.ingress.dc1_process(pkt, pkt.flow_id, now):
                self._send(coded, now)


# ---------------------------------------------------------------------------
# simulation

@dataclass
class SimulationResult:
    config: ScenarioConfig
    seed: int
    events: EventLog
    network: Network
    registry: Registry
    plans: Dict[str, FlowPlan]
    hosts: Dict[str, EndHost]
    dcs: Dict[str, DataCenterHost]
    selections: Dict[str, ServiceSelection]
    stop_at: int
    t_end: int


class Simulation:
    """Builds the topology of one scenario and runs it to completion."""

    def __init__(self, config: ScenarioConfig, seed: Optional[int] = None,
                 event_detail: Optional[str] = None):
        self.config = config
        self.seed = seed if seed is not None else (config.seed if config.seed is not None else 0)
        self.events = EventLog(event_detail or config.event_detail)
        self.net = Network(self.seed, self.events)
        self.registry = Registry(config.feedback.violations)
        self.plans = plan_flows(config)
        self.selections: Dict[str, ServiceSelection] = {}
        self.stop_at = ms_to_us(config.duration_ms)
        self.t_end = self.stop_at + ms_to_us(config.drain_ms)

        for link in config.topology.links:
            self.net.add_link(link)
        self.hosts = {h.name: EndHost(h.name, self.net, config.detector, self.events)
                      for h in config.topology.hosts}
        ttls = dc_ttls(config, self.plans)
        self.dcs = {dc: DataCenterHost(dc, self.net, self.registry, config.coding, ttls[dc], self.events)
                    for dc in config.topology.dcs}
        for name, node in {**self.hosts, **self.dcs}.items():
            self.net.attach(name, node.handle)

        for flow in config.flows:
            self._register(flow)
        self._groups: Dict[str, SyncGroup] = {}
        for index, flow in enumerate(config.flows):
            self._start_traffic(index, flow)
        if config.feedback.enabled:
            self.net.env.process(self._feedback())

    def _register(self, flow: FlowConfig) -> None:
        plan = self.plans[flow.flow_id]
        selection = self.registry.register(
            flow.flow_id, flow.source, flow.destination, flow.latency_budget_ms, plan.latencies,
            service=flow.service, ingress_dc=plan.ingress_dc, egress_dc=plan.egress_dc,
        )
        self.selections[flow.flow_id] = selection
        self.hosts[flow.source].sender.add_flow(flow.flow_id, flow.destination, plan.ingress_dc,
                                                selection.kind, flow.duplication)
        self.hosts[flow.destination].receiver.add_flow(
            flow.flow_id, selection.kind, plan.egress_dc, plan.rtt,
            recovery_budget=plan.recovery_budget, retention=plan.retention,
        )
        if selection.kind == ServiceKind.CODING:
            self.dcs[plan.ingress_dc].ingress.assign_flow(flow.flow_id, plan.egress_dc)
        for a, b in ((flow.source, flow.destination), (flow.source, plan.ingress_dc),
                     (plan.ingress_dc, plan.egress_dc), (plan.egress_dc, flow.destination)):
            if a and b and a != b and (a, b) not in self.net.links and self._needs(selection.kind, a, b, flow):
                raise ScenarioError([f"flows.{flow.flow_id}: no link {a} -> {b} for {selection.kind.value}"])

    @staticmethod
    def _needs(kind: ServiceKind, a: str, b: str, flow: FlowConfig) -> bool:
        direct = (a, b) == (flow.source, flow.destination)
        if kind == ServiceKind.FORWARDING:
            return not direct or flow.duplication.duplicate_both
        if kind == ServiceKind.DIRECT:
            return direct
        return True

    def _start_traffic(self, index: int, flow: FlowConfig) -> None:
        sender = self.hosts[flow.source].sender
        payloads = self.net.rng(index + 1)
        count = {"n": 0}

        def emit(now: int, markers: frozenset) -> None:
            if count["n"] < flow.handshake_packets:
                markers = markers | {HANDSHAKE}
            count["n"] += 1
            pkt = sender.next_packet(flow.flow_id, payloads.bytes(flow.payload_bytes), now, markers)
            sender.send(pkt, now=now)

        group = None
        if getattr(flow.pattern, "sync_group", None):
            name = flow.pattern.sync_group
            if name not in self._groups:
                self._groups[name] = SyncGroup(self.net, flow.pattern, self.net.rng(0, len(self._groups)),
                                               self.stop_at)
            group = self._groups[name]
        self.net.traffic_generator(flow.pattern, emit, self.stop_at, start_event=group,
                                   rng=self.net.rng(0, 1000 + index))

    def _feedback(self):
        window = ms_to_us(self.config.feedback.window_ms)
        while self.net.now + window <= self.t_end:
            yield self.net.env.timeout(window)
            now = self.net.now
            for flow in self.config.flows:
                receiver = self.hosts[flow.destination].receiver
                stats = receiver.report_stats(flow.flow_id, now - window, now)
                upgrade = self.registry.feedback_update(flow.flow_id, stats)
                if upgrade is None:
                    continue
                self.hosts[flow.source].sender.set_service(flow.flow_id, upgrade)
                receiver.flows[flow.flow_id].service = upgrade
                self.events.record(now, "service_change", "control", flow=flow.flow_id,
                                   detail={"service": upgrade.value,
                                           "p95_ms": stats.p95_latency_ms})

    def run(self) -> SimulationResult:
        logger.info(f"▶️ running {self.config.name} (seed {self.seed}, {len(self.config.flows)} flows)")
        self.net.run_until(self.t_end)
        logger.info(f"✅ {self.config.name}: {len(self.events)} events")
        return SimulationResult(self.config, self.seed, self.events, self.net, self.registry, self.plans,
                                self.hosts, self.dcs, self.selections, self.stop_at, self.t_end)


def run_scenario(config: ScenarioConfig, out_dir: Optional[Union[str, Path]] = None,
                 seed: Optional[int] = None, event_detail: Optional[str] = None):
    """Simulate one scenario; returns (MetricsReport, SimulationResult) and writes artifacts if asked."""
    from .metrics import build_report, write_artifacts

    result = Simulation(config, seed=seed, event_detail=event_detail).run()
    report = build_report(result)
    if out_dir is not None:
        write_artifacts(report, result, Path(out_dir) / config.name)
    return report, result


# ---------------------------------------------------------------------------
# canned topologies

def build_overlay_scenario(
    *,
    name: str = "overlay",
    flows: int = 4,
    service: Optional[ServiceKind] = ServiceKind.CODING,
    y_ms: float = 80.0,
    delta_s_ms: float = 5.0,
    delta_r_ms: float = 10.0,
    helper_delta_ms: Optional[float] = None,
    x_ms: float = 20.0,
    period_ms: float = 10.0,
    duration_ms: float = 2000.0,
    drain_ms: float = 1000.0,
    direct_loss: Optional[Dict[int, object]] = None,
    response_delay_ms: Optional[Dict[int, float]] = None,
    jitter=None,
    coding: Optional[CodingParams] = None,
    detector: Optional[DetectorConfig] = None,
    storage: Optional[StorageConfig] = None,
    single_dc: bool = False,
    count: Optional[int] = None,
    seed: int = 1,
    event_detail: str = "standard",
    budget_ms: float = 200.0,
    duplication: Optional[DuplicationPolicy] = None,
) -> ScenarioConfig:
    """S_i -> R_i flows over DC1/DC2 with synchronized CBR traffic.

    Flow 0's receiver sits ``delta_r_ms`` from DC2; the other receivers act as
    helpers at ``helper_delta_ms``. ``direct_loss`` maps flow index to a loss
    spec on its direct path; ``response_delay_ms`` overrides a receiver's
    latency back to DC2.
    """
    direct_loss = direct_loss or {}
    response_delay_ms = response_delay_ms or {}
    helper = helper_delta_ms if helper_delta_ms is not None else delta_r_ms
    dc1, dc2 = ("dc1", "dc1") if single_dc else ("dc1", "dc2")
    dcs = [dc1] if single_dc else [dc1, dc2]
    hosts, links, flow_cfgs = [], [], []
    if not single_dc:
        links.append(LinkConfig(src=dc1, dst=dc2, latency_ms=x_ms))
    for i in range(flows):
        s, r = f"s{i}", f"r{i}"
        hosts += [HostConfig(name=s, dc=dc1), HostConfig(name=r, dc=dc2)]
        links.append(LinkConfig(src=s, dst=r, latency_ms=y_ms, jitter=jitter or NoJitter(),
                                loss=direct_loss.get(i)))
        links.append(LinkConfig(src=s, dst=dc1, latency_ms=delta_s_ms))
        links.append(LinkConfig(src=dc2, dst=r, latency_ms=delta_r_ms if i == 0 else helper,
                                reverse_latency_ms=response_delay_ms.get(i)))
        flow_cfgs.append(FlowConfig(
            flow_id=f"f{i}", source=s, destination=r,
            pattern=CbrPattern(period_ms=period_ms, count=count),
            latency_budget_ms=budget_ms, service=service,
            duplication=duplication or DuplicationPolicy(),
        ))
    return ScenarioConfig(
        name=name,
        seed=seed,
        duration_ms=duration_ms,
        drain_ms=drain_ms,
        topology=TopologyConfig(hosts=hosts, dcs=dcs, links=links),
        flows=flow_cfgs,
        coding=coding or CodingParams(k=max(3, min(flows, 10)), m_cross=2),
        detector=detector or DetectorConfig(),
        storage=storage or StorageConfig(),
        event_detail=event_detail,
    )
