"""Control plane: membership, per-service delay, service selection, feedback and cost."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .errors import DuplicateFlowError, UnknownFlowError
from .models import (
    SERVICE_LADDER,
    CodingParams,
    CostModel,
    DeliveryStats,
    PathLatencies,
    ServiceKind,
    ServiceSelection,
)

logger = logging.getLogger(__name__)


def service_delay(kind: ServiceKind, lat: PathLatencies) -> float:
    """One-way delivery delay (ms) of a packet under each service."""
    if kind == ServiceKind.FORWARDING:
        return lat.x + lat.delta_s_dc1 + lat.delta_r_dc2
    if kind == ServiceKind.CACHING:
        return lat.y + 2 * lat.delta_r_dc2 + lat.delta_cap
    if kind == ServiceKind.CODING:
        return lat.y + 2 * lat.delta_r_dc2 + 2 * lat.delta_r_prime_dc2 + lat.delta_cap
    return lat.y


def select_service(budget_ms: float, lat: PathLatencies) -> ServiceSelection:
    """Cheapest service whose delay fits the budget; forwarding with a flag otherwise."""
    if budget_ms <= 0:
        raise ValueError(f"latency budget must be positive, got {budget_ms}")
    delays = {kind.value: service_delay(kind, lat) for kind in SERVICE_LADDER}
    for kind in SERVICE_LADDER:
        if delays[kind.value] <= budget_ms:
            return ServiceSelection(kind=kind, delay_ms=delays[kind.value], delays=delays)
    fallback = ServiceKind.FORWARDING
    logger.warning(f"⚠️ no service meets {budget_ms} ms (forwarding needs {delays[fallback.value]:.1f} ms)")
    return ServiceSelection(kind=fallback, delay_ms=delays[fallback.value], over_budget=True, delays=delays)


def next_service(kind: ServiceKind) -> Optional[ServiceKind]:
    """Next rung up the cost ladder, or None at the top (and for direct-only flows)."""
    if kind not in SERVICE_LADDER:
        return None
    index = SERVICE_LADDER.index(kind)
    return SERVICE_LADDER[index + 1] if index + 1 < len(SERVICE_LADDER) else None


@dataclass
class FlowRecord:
    flow_id: str
    source: str
    destination: str
    latency_budget_ms: float
    latencies: PathLatencies
    service: ServiceKind
    over_budget: bool = False
    ingress_dc: Optional[str] = None
    egress_dc: Optional[str] = None
    violations: int = 0
    history: List[ServiceKind] = field(default_factory=list)


class Registry:
    """In-process membership registry: flows, their DCs and active services."""

    def __init__(self, violations_to_upgrade: int = 2):
        self.violations_to_upgrade = violations_to_upgrade
        self.flows: Dict[str, FlowRecord] = {}

    def register(self, flow_id: str, source: str, destination: str, latency_budget_ms: float,
                 latencies: PathLatencies, service: Optional[ServiceKind] = None,
                 ingress_dc: Optional[str] = None, egress_dc: Optional[str] = None) -> ServiceSelection:
        if flow_id in self.flows:
            raise DuplicateFlowError(flow_id)
        selection = select_service(latency_budget_ms, latencies)
        if service is not None:
            selection = ServiceSelection(
                kind=service,
                delay_ms=service_delay(service, latencies),
                over_budget=service_delay(service, latencies) > latency_budget_ms,
                delays=selection.delays,
            )
        self.flows[flow_id] = FlowRecord(
            flow_id, source, destination, latency_budget_ms, latencies, selection.kind,
            selection.over_budget, ingress_dc, egress_dc, history=[selection.kind],
        )
        logger.info(f"registered {flow_id} {source}->{destination}: {selection.kind.value} "
                    f"({selection.delay_ms:.1f} ms vs budget {latency_budget_ms} ms)")
        return selection

    def lookup(self, flow_id: str) -> FlowRecord:
        try:
            return self.flows[flow_id]
        except KeyError:
            raise UnknownFlowError(flow_id) from None

    def receiver_of(self, flow_id: str) -> str:
        return self.lookup(flow_id).destination

    def flows_via(self, dc: str) -> List[FlowRecord]:
        return [r for r in self.flows.values() if dc in (r.ingress_dc, r.egress_dc)]

    def feedback_update(self, flow_id: str, stats: DeliveryStats,
                        budget_ms: Optional[float] = None) -> Optional[ServiceKind]:
        """Upgrade one rung after consecutive windows whose p95 exceeds the budget."""
        record = self.lookup(flow_id)
        budget = budget_ms if budget_ms is not None else record.latency_budget_ms
        if stats.delivered == 0 or stats.p95_latency_ms is None:
            record.violations = 0
            return None
        if stats.p95_latency_ms <= budget:
            record.violations = 0
            return None
        record.violations += 1
        if record.violations < self.violations_to_upgrade:
            return None
        record.violations = 0
        upgrade = next_service(record.service)
        if upgrade is None:
            return None
        logger.info(f"⬆️ {flow_id}: p95 {stats.p95_latency_ms:.1f} ms over {budget} ms, "
                    f"{record.service.value} -> {upgrade.value}")
        record.service = upgrade
        record.history.append(upgrade)
        return upgrade


# ---------------------------------------------------------------------------
# Cost

def aggregate_rate_gb_per_hour(calls: int, mbps: float) -> float:
    """Aggregate GB/hour for ``calls`` sessions at ``mbps`` each (decimal GB)."""
    return calls * mbps * 3600 / 8 / 1000


def deployment_cost(kind: ServiceKind, aggregate_rate: float, params: CodingParams,
                    model: CostModel, *, ingress_dc: str = "dc1", egress_dc: str = "dc2",
                    worst_case: bool = True) -> float:
    """Bandwidth cost ($/hour) of carrying ``aggregate_rate`` GB/hour through the overlay."""
    if aggregate_rate <= 0:
        raise ValueError(f"aggregate rate must be positive, got {aggregate_rate}")
    c1 = model.price_for(ingress_dc)
    c2 = model.price_for(egress_dc)
    fee_in = model.ingress_price
    if kind == ServiceKind.FORWARDING:
        return aggregate_rate * (c1 + c2) + 2 * aggregate_rate * fee_in
    if kind == ServiceKind.CACHING:
        pulled = 1.0 if worst_case else model.loss_rate
        return aggregate_rate * (c1 + pulled * c2) + 2 * aggregate_rate * fee_in
    if kind == ServiceKind.CODING:
        alpha = model.alpha if model.alpha is not None else params.cross_rate
        coded = alpha * aggregate_rate
        return coded * (c1 + c2) + (aggregate_rate + coded) * fee_in
    return 0.0


def cost_table(aggregate_rate: float, params: CodingParams, model: CostModel) -> Dict[str, float]:
    """$/hour per service, caching shown for both the worst and the expected case."""
    return {
        ServiceKind.FORWARDING.value: deployment_cost(ServiceKind.FORWARDING, aggregate_rate, params, model),
        "caching_worst": deployment_cost(ServiceKind.CACHING, aggregate_rate, params, model),
        "caching_expected": deployment_cost(ServiceKind.CACHING, aggregate_rate, params, model,
                                            worst_case=False),
        ServiceKind.CODING.value: deployment_cost(ServiceKind.CODING, aggregate_rate, params, model),
    }
