"""Service feasibility over measured latency datasets."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from .control_plane import service_delay
from .errors import DatasetError
from .models import ALL_REGIONS, LatencyDatasetRow, ServiceKind

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ["path_id", "region", "delta_s_dc1", "delta_r_dc2", "x", "y"]
DELAY_SERVICES = (ServiceKind.FORWARDING, ServiceKind.CACHING, ServiceKind.CODING)


def load_dataset(path: Union[str, Path]) -> List[LatencyDatasetRow]:
    """Read a latency CSV; every bad row is reported with its file line number."""
    try:
        frame = pd.read_csv(path, dtype={"path_id": str, "region": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DatasetError([(1, f"cannot read file: {exc}")], str(path)) from exc
    return parse_dataset(frame, str(path))


def parse_dataset(frame: pd.DataFrame, source: str = "") -> List[LatencyDatasetRow]:
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise DatasetError([(1, f"missing columns: {', '.join(missing)}")], source)

    rows, problems = [], []
    records = frame.replace({np.nan: None}).to_dict(orient="records")
    for index, record in enumerate(records):
        line = index + 2  # header is line 1
        try:
            rows.append(LatencyDatasetRow.model_validate(record))
        except ValidationError as exc:
            for err in exc.errors():
                where = ".".join(str(p) for p in err["loc"])
                problems.append((line, f"{where}: {err['msg']}" if where else err["msg"]))
    if problems:
        raise DatasetError(problems, source)
    logger.info(f"loaded {len(rows)} paths from {source or 'dataset'}")
    return rows


@dataclass
class FeasibilityReport:
    budget_ms: float
    delays: pd.DataFrame
    within_budget: pd.DataFrame

    def fraction(self, service: ServiceKind, region: str = ALL_REGIONS) -> float:
        hit = self.within_budget[(self.within_budget["region"] == region)
                                 & (self.within_budget["service"] == service.value)]
        return float(hit["fraction"].iloc[0])

    def cdf(self, service: ServiceKind) -> pd.DataFrame:
        """Empirical CDF points (delay_ms, probability) of one service's delay."""
        values = np.sort(self.delays[service.value].to_numpy(dtype=float))
        return pd.DataFrame({
            "delay_ms": values,
            "probability": np.arange(1, len(values) + 1) / len(values),
        })

    def cdf_points(self) -> pd.DataFrame:
        frames = [self.cdf(kind).assign(service=kind.value) for kind in DELAY_SERVICES]
        return pd.concat(frames, ignore_index=True)[["service", "delay_ms", "probability"]]

    def write(self, out_dir: Union[str, Path]) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.delays.to_csv(out / "service_delays.csv", index=False)
        self.within_budget.to_csv(out / "within_budget.csv", index=False)
        self.cdf_points().to_csv(out / "delay_cdf.csv", index=False)
        return out


def feasibility_analysis(rows: List[LatencyDatasetRow], budget_ms: float,
                         delta_ms: float = 0.0) -> FeasibilityReport:
    """Per-path service delays and the share of paths each service serves within budget.

    ``delta_ms`` stands in for the DC2 wait on rows that do not carry one.
    """
    if budget_ms <= 0:
        raise ValueError(f"budget must be positive, got {budget_ms}")
    if not rows:
        raise DatasetError([(1, "dataset has no rows")])

    records = []
    for row in rows:
        lat = row.to_latencies(delta_ms)
        record = {"path_id": row.path_id, "region": row.region, "direct": lat.y}
        for kind in DELAY_SERVICES:
            record[kind.value] = service_delay(kind, lat)
        records.append(record)
    delays = pd.DataFrame(records, columns=["path_id", "region", "direct"] + [k.value for k in DELAY_SERVICES])

    summary = []
    for region, group in [(ALL_REGIONS, delays)] + sorted(delays.groupby("region"), key=lambda g: g[0]):
        for kind in DELAY_SERVICES:
            within = int((group[kind.value] <= budget_ms).sum())
            summary.append({"region": region, "service": kind.value, "paths": len(group),
                            "within_budget": within, "fraction": within / len(group)})
    within_budget = pd.DataFrame(summary, columns=["region", "service", "paths", "within_budget", "fraction"])

    for kind in DELAY_SERVICES:
        share = within_budget[(within_budget["region"] == ALL_REGIONS)
                              & (within_budget["service"] == kind.value)]["fraction"].iloc[0]
        logger.info(f"{kind.value}: {share:.1%} of {len(delays)} paths within {budget_ms} ms")
    return FeasibilityReport(budget_ms=budget_ms, delays=delays, within_budget=within_budget)
