"""Data models for overlay QoS scenarios, protocol parameters and reports."""

from enum import Enum
from fractions import Fraction
from typing import Annotated, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, field_validator, model_validator


# Calibrated so that forwarding 101.25 GB/hour through two DCs costs $17.60/hour.
CALIBRATED_EGRESS_PRICE = 17.60 / (2 * 101.25)

SCHEMA_VERSION = 1

# region label of the dataset-wide summary rows
ALL_REGIONS = "all"


def ms_to_us(ms: float) -> int:
    """Convert milliseconds to integer virtual-time microseconds."""
    return int(round(ms * 1000))


class ServiceKind(str, Enum):
    """Overlay services, cheapest to most expensive after DIRECT."""
    DIRECT = "direct"
    CODING = "coding"
    CACHING = "caching"
    FORWARDING = "forwarding"


# Upgrade ladder, cheapest first.
SERVICE_LADDER: Tuple[ServiceKind, ...] = (
    ServiceKind.CODING,
    ServiceKind.CACHING,
    ServiceKind.FORWARDING,
)


class DuplicationMode(str, Enum):
    ALL = "all"
    SELECTIVE = "selective"
    NONE = "none"


class DuplicationPolicy(BaseModel):
    """Which sender packets are copied toward the ingress DC."""

    mode: DuplicationMode = Field(DuplicationMode.ALL, description="ALL, SELECTIVE or NONE")
    markers: List[str] = Field(
        default_factory=list,
        description="SELECTIVE only: a packet is duplicated when it carries any of these markers",
    )
    duplicate_both: bool = Field(
        False, description="Forwarding only: also send every packet on the direct path"
    )

    def allows(self, markers) -> bool:
        if self.mode == DuplicationMode.ALL:
            return True
        if self.mode == DuplicationMode.NONE:
            return False
        return bool(set(self.markers) & set(markers))


class CodingParams(BaseModel):
    """Coding parameters governing DC1's in-stream and cross-stream queues."""

    k: int = Field(4, ge=1, le=10, description="Max flows per cross-stream batch")
    m_cross: int = Field(2, ge=1, description="Coded packets emitted per cross-stream batch")
    cross_enabled: bool = Field(True, description="Disable to run in-stream coding only")
    r: Optional[float] = Field(
        None,
        gt=0,
        lt=1,
        description="Explicit cross-stream rate for cost accounting; defaults to m_cross/k",
    )
    s: float = Field(0.0, ge=0, lt=1, description="In-stream rate, e.g. 0.2 for one parity per 5 packets")
    queues_per_group: int = Field(1, ge=1, description="Cross-stream queues per subgroup")
    queue_timeout_ms: float = Field(25.0, gt=0, description="Per-queue flush timer")
    in_stream_timeout_ms: Optional[float] = Field(
        None, gt=0, description="In-stream queue flush timer; defaults to queue_timeout_ms per block slot"
    )

    @model_validator(mode="after")
    def _check_rates(self) -> "CodingParams":
        if self.cross_enabled and self.r is None and not (0 < self.m_cross / self.k < 1):
            raise ValueError(f"cross-stream rate m_cross/k = {self.m_cross}/{self.k} must be below 1")
        block, parities = self.in_stream_geometry
        if block and block + parities > 255:
            raise ValueError(f"in-stream block {block}+{parities} exceeds 255 symbols")
        return self

    @property
    def cross_rate(self) -> float:
        return self.r if self.r is not None else self.m_cross / self.k

    @property
    def in_stream_geometry(self) -> Tuple[int, int]:
        """(data packets, parities) per in-stream block; (0, 0) when disabled."""
        if self.s <= 0:
            return 0, 0
        frac = Fraction(self.s).limit_denominator(64)
        return frac.denominator, frac.numerator

    @property
    def in_stream_block(self) -> int:
        return self.in_stream_geometry[0]

    @property
    def queue_timeout_us(self) -> int:
        return ms_to_us(self.queue_timeout_ms)

    @property
    def in_stream_timeout_us(self) -> int:
        if self.in_stream_timeout_ms is not None:
            return ms_to_us(self.in_stream_timeout_ms)
        return ms_to_us(self.queue_timeout_ms * max(1, self.in_stream_block))


class PathLatencies(BaseModel):
    """One-way latencies (ms) for one sender/receiver pair and its DCs."""

    delta_s_dc1: float = Field(..., ge=0, description="Sender to DC1")
    delta_r_dc2: float = Field(..., ge=0, description="Receiver to DC2")
    x: float = Field(..., ge=0, description="DC1 to DC2")
    y: float = Field(..., ge=0, description="Direct sender to receiver")
    delta_r_prime_dc2: float = Field(0.0, ge=0, description="Slowest helper receiver to DC2")
    delta_cap: float = Field(0.0, ge=0, description="Wait at DC2 when a pull precedes the packet")

    @property
    def rtt_direct(self) -> float:
        return 2 * self.y


class CostModel(BaseModel):
    egress_price: float = Field(CALIBRATED_EGRESS_PRICE, ge=0, description="$ per GB leaving a DC")
    ingress_price: float = Field(0.0, ge=0, description="$ per GB entering a DC")
    per_dc_overrides: Dict[str, float] = Field(default_factory=dict, description="DC name -> egress $/GB")
    alpha: Optional[float] = Field(None, ge=0, lt=1, description="Effective coding fraction; defaults to r")
    loss_rate: float = Field(0.0, ge=0, le=1, description="Expected pull fraction for the caching service")

    @field_validator("per_dc_overrides")
    @classmethod
    def _non_negative(cls, v: Dict[str, float]) -> Dict[str, float]:
        for dc, price in v.items():
            if price < 0:
                raise ValueError(f"egress price for {dc} is negative")
        return v

    def price_for(self, dc: Optional[str]) -> float:
        if dc is not None and dc in self.per_dc_overrides:
            return self.per_dc_overrides[dc]
        return self.egress_price


class ServiceSelection(BaseModel):
    kind: ServiceKind
    delay_ms: float
    over_budget: bool = False
    delays: Dict[str, float] = Field(default_factory=dict, description="service -> computed delay")


class DeliveryStats(BaseModel):
    """Receiver delivery statistics for one reporting window."""

    flow_id: str
    window_start_us: int
    window_end_us: int
    delivered: int = 0
    p50_latency_ms: Optional[float] = None
    p95_latency_ms: Optional[float] = None
    losses: int = Field(0, description="Seqs first NACKed inside the window")
    recoveries: int = Field(0, description="Recovered deliveries inside the window")
    nacks: int = Field(0, description="NACKs sent inside the window")
    total_losses: int = Field(0, description="Seqs NACKed since the flow started")
    total_recoveries: int = Field(0, description="Recovered deliveries since the flow started")
    total_nacks: int = Field(0, description="NACKs sent since the flow started")


# ---------------------------------------------------------------------------
# Scenario configuration

class NoJitter(BaseModel):
    kind: Literal["none"] = "none"


class UniformJitter(BaseModel):
    kind: Literal["uniform"] = "uniform"
    j_ms: float = Field(..., ge=0, description="Samples are uniform in [-j, +j]")


class NormalJitter(BaseModel):
    kind: Literal["normal"] = "normal"
    sigma_ms: float = Field(..., ge=0)


JitterSpec = Annotated[Union[NoJitter, UniformJitter, NormalJitter], Field(discriminator="kind")]


class BernoulliLoss(BaseModel):
    kind: Literal["bernoulli"] = "bernoulli"
    p: float = Field(..., ge=0, le=1)


class BurstChainLoss(BaseModel):
    kind: Literal["burst_chain"] = "burst_chain"
    p_first: float = Field(0.01, ge=0, le=1)
    p_subsequent: float = Field(0.5, ge=0, le=1)


class OutageLoss(BaseModel):
    kind: Literal["outage"] = "outage"
    intervals_ms: List[Tuple[float, float]] = Field(..., description="[start, end) windows")

    @field_validator("intervals_ms")
    @classmethod
    def _non_overlapping(cls, v: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
        ordered = sorted(v)
        for start, end in ordered:
            if end <= start:
                raise ValueError(f"outage [{start}, {end}) is empty")
        for (_, prev_end), (start, _) in zip(ordered, ordered[1:]):
            if start < prev_end:
                raise ValueError("outage intervals overlap")
        return ordered


class CompositeLoss(BaseModel):
    kind: Literal["composite"] = "composite"
    models: List["LossSpec"] = Field(default_factory=list)


LossSpec = Annotated[
    Union[BernoulliLoss, BurstChainLoss, OutageLoss, CompositeLoss], Field(discriminator="kind")
]
CompositeLoss.model_rebuild()


class LinkConfig(BaseModel):
    src: str
    dst: str
    latency_ms: float = Field(..., ge=0)
    jitter: JitterSpec = Field(default_factory=NoJitter)
    loss: Optional[LossSpec] = None
    bandwidth_mbps: Optional[float] = Field(None, gt=0)
    bidirectional: bool = True
    reverse_latency_ms: Optional[float] = Field(None, ge=0)
    reverse_loss: Optional[LossSpec] = None


class HostConfig(BaseModel):
    name: str
    dc: Optional[str] = Field(None, description="Nearby DC; required for overlay services")


class TopologyConfig(BaseModel):
    hosts: List[HostConfig]
    dcs: List[str] = Field(default_factory=list)
    links: List[LinkConfig] = Field(default_factory=list)


class CbrPattern(BaseModel):
    kind: Literal["cbr"] = "cbr"
    period_ms: float = Field(..., gt=0)
    start_ms: float = Field(0.0, ge=0)
    count: Optional[int] = Field(None, ge=1, description="Stop after this many packets")


class OnOffPattern(BaseModel):
    kind: Literal["onoff"] = "onoff"
    on_ms: float = Field(..., gt=0)
    off_mean_ms: float = Field(..., gt=0, description="Mean of the exponential OFF duration")
    period_ms: float = Field(..., gt=0)
    start_ms: float = Field(0.0, ge=0)
    sync_group: Optional[str] = Field(None, description="Flows sharing a group share ON starts")


TrafficPattern = Annotated[Union[CbrPattern, OnOffPattern], Field(discriminator="kind")]


class FlowConfig(BaseModel):
    flow_id: str
    source: str
    destination: str
    pattern: TrafficPattern
    latency_budget_ms: float = Field(200.0, gt=0)
    service: Optional[ServiceKind] = Field(None, description="None selects automatically")
    duplication: DuplicationPolicy = Field(default_factory=DuplicationPolicy)
    payload_bytes: int = Field(160, ge=1)
    handshake_packets: int = Field(0, ge=0, description="Leading packets marked 'handshake'")


class DetectorConfig(BaseModel):
    small_timeout_ms: float = Field(25.0, gt=0)
    long_timeout_ms: Optional[float] = Field(None, gt=0, description="Defaults to the direct RTT")
    history: int = Field(16, ge=1)
    burst_factor: float = Field(2.0, gt=0)
    max_silence_ms: float = Field(5000.0, gt=0)
    reorder_tolerance_ms: Optional[float] = Field(
        None, ge=0, description="How long past its expected arrival a gap seq may still show up; defaults to the small timeout"
    )
    transit_window: int = Field(128, ge=1, description="Recent arrivals used for the slowest-transit estimate")
    escalate_in_stream_failure: bool = False


class StorageConfig(BaseModel):
    ttl_ms: Optional[float] = Field(None, gt=0, description="DC2 cache/store ttl; defaults to 2x RTT")
    replay_retention_ms: Optional[float] = Field(None, gt=0, description="Defaults to 2x RTT")


class FeedbackConfig(BaseModel):
    enabled: bool = False
    window_ms: float = Field(1000.0, gt=0)
    violations: int = Field(2, ge=1, description="Consecutive violating windows before upgrade")


class ScenarioConfig(BaseModel):
    """One experiment: topology, flows and protocol parameters."""

    schema_version: Literal[1] = SCHEMA_VERSION
    name: str = "scenario"
    seed: Optional[int] = None
    duration_ms: float = Field(..., gt=0)
    drain_ms: float = Field(1000.0, ge=0, description="Extra time after the last send")
    topology: TopologyConfig
    flows: List[FlowConfig] = Field(default_factory=list)
    coding: CodingParams = Field(default_factory=CodingParams)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    storage: StorageConfig = Field(default_factory=StorageConfig)
    feedback: FeedbackConfig = Field(default_factory=FeedbackConfig)
    cost: CostModel = Field(default_factory=CostModel)
    event_detail: Literal["standard", "full"] = "standard"

    @model_validator(mode="after")
    def _references_resolve(self) -> "ScenarioConfig":
        problems = []
        hosts = {h.name: h for h in self.topology.hosts}
        dcs = set(self.topology.dcs)
        if len(hosts) != len(self.topology.hosts):
            problems.append("topology.hosts: duplicate host name")
        if hosts.keys() & dcs:
            problems.append("topology: a name is used for both a host and a DC")
        for i, host in enumerate(self.topology.hosts):
            if host.dc is not None and host.dc not in dcs:
                problems.append(f"topology.hosts.{i}.dc: unknown DC '{host.dc}'")
        nodes = hosts.keys() | dcs
        for i, link in enumerate(self.topology.links):
            for end in ("src", "dst"):
                if getattr(link, end) not in nodes:
                    problems.append(f"topology.links.{i}.{end}: unknown node '{getattr(link, end)}'")
        seen = set()
        for i, flow in enumerate(self.flows):
            if flow.flow_id in seen:
                problems.append(f"flows.{i}.flow_id: duplicate flow '{flow.flow_id}'")
            seen.add(flow.flow_id)
            for end in ("source", "destination"):
                if getattr(flow, end) not in hosts:
                    problems.append(f"flows.{i}.{end}: unknown host '{getattr(flow, end)}'")
            if flow.service not in (None, ServiceKind.DIRECT):
                for end in ("source", "destination"):
                    host = hosts.get(getattr(flow, end))
                    if host is not None and host.dc is None:
                        problems.append(f"flows.{i}.{end}: host needs a nearby DC for {flow.service.value}")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def link(self, src: str, dst: str) -> Optional[LinkConfig]:
        """Configured link carrying src -> dst, in either declared direction."""
        for link in self.topology.links:
            if link.src == src and link.dst == dst:
                return link
            if link.bidirectional and link.src == dst and link.dst == src:
                return link
        return None

    def one_way_ms(self, src: str, dst: str) -> Optional[float]:
        link = self.link(src, dst)
        if link is None:
            return None
        if link.src == src or link.reverse_latency_ms is None:
            return link.latency_ms
        return link.reverse_latency_ms

    def host(self, name: str) -> HostConfig:
        for h in self.topology.hosts:
            if h.name == name:
                return h
        raise KeyError(name)


# ---------------------------------------------------------------------------
# Reports

class FlowMetrics(BaseModel):
    path: str
    service: str
    sent: int = 0
    delivered_direct: int = 0
    delivered_overlay: int = 0
    recovered: int = 0
    unrecovered: int = 0
    in_flight: int = 0
    lost: int = 0
    loss_rate: float = 0.0
    recovered_fraction: Optional[float] = None
    unrecovered_fraction: Optional[float] = None
    recovery_rtt_quantiles: Dict[str, float] = Field(default_factory=dict)
    nacks: int = 0
    spurious_nacks: int = 0
    access_drops: int = 0
    seq_complete_ms: Optional[float] = None


class MetricsReport(BaseModel):
    scenario: str
    seed: int
    flows: Dict[str, FlowMetrics] = Field(default_factory=dict)
    aggregate: FlowMetrics
    episodes: Dict[str, int] = Field(default_factory=dict, description="Random/MultiPacket/Outage counts")
    episode_losses: Dict[str, int] = Field(default_factory=dict, description="Packets lost per bucket")
    bytes_per_link: Dict[str, int] = Field(default_factory=dict)
    cost_per_service: Dict[str, float] = Field(default_factory=dict)
    coded_overhead: Dict[str, float] = Field(default_factory=dict)
    failures: Dict[str, int] = Field(default_factory=dict)
    coding_recovery_rate: Optional[float] = None


class LatencyDatasetRow(BaseModel):
    """One measured path; all latencies in ms."""

    path_id: str
    region: str
    delta_s_dc1: float = Field(..., ge=0)
    delta_r_dc2: float = Field(..., ge=0)
    x: float = Field(..., ge=0)
    y: float = Field(..., ge=0)
    delta_r_prime_dc2: Optional[float] = Field(None, ge=0)
    helper_1: Optional[float] = Field(None, ge=0)
    helper_2: Optional[float] = Field(None, ge=0)
    helper_3: Optional[float] = Field(None, ge=0)
    helper_4: Optional[float] = Field(None, ge=0)
    helper_5: Optional[float] = Field(None, ge=0)
    delta: Optional[float] = Field(None, ge=0, description="DC2 wait; falls back to the CLI default")

    @field_validator("region")
    @classmethod
    def _region_name(cls, v: str) -> str:
        if v.strip().lower() == ALL_REGIONS:
            raise ValueError(f"region name '{ALL_REGIONS}' is reserved for the dataset-wide summary")
        return v

    @model_validator(mode="after")
    def _helper_latency(self) -> "LatencyDatasetRow":
        if self.delta_r_prime_dc2 is None and not self.helpers:
            raise ValueError("needs delta_r_prime_dc2 or at least one helper_N latency")
        return self

    @property
    def helpers(self) -> List[float]:
        values = [self.helper_1, self.helper_2, self.helper_3, self.helper_4, self.helper_5]
        return [v for v in values if v is not None]

    def to_latencies(self, default_delta: float = 0.0) -> PathLatencies:
        helper = self.delta_r_prime_dc2 if self.delta_r_prime_dc2 is not None else max(self.helpers)
        return PathLatencies(
            delta_s_dc1=self.delta_s_dc1,
            delta_r_dc2=self.delta_r_dc2,
            x=self.x,
            y=self.y,
            delta_r_prime_dc2=helper,
            delta_cap=self.delta if self.delta is not None else default_delta,
        )
