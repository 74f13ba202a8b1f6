"""Command-line harness: run scenarios, validate them, and analyze results."""

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

from config import config
from src.control_plane import aggregate_rate_gb_per_hour, cost_table
from src.errors import CloudQosError
from src.feasibility import feasibility_analysis, load_dataset
from src.metrics import DEFAULT_LEVELS, fec_whatif, load_trace
from src.models import CodingParams, CostModel, ServiceKind
from src.scenario import load_scenario, run_scenario

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INVALID = 2


def setup_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=getattr(logging, (level or config.log_level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )


def _run_one(path: str, seed: Optional[int], out: str, detail: Optional[str]) -> dict:
    """Worker entry point; one isolated simulation per call."""
    scenario = load_scenario(path)
    if seed is None and scenario.seed is None:
        seed = config.default_seed
    report, _ = run_scenario(scenario, out_dir=out, seed=seed, event_detail=detail)
    return {
        "scenario": report.scenario,
        "seed": report.seed,
        "loss_rate": report.aggregate.loss_rate,
        "recovered_fraction": report.aggregate.recovered_fraction,
        "out": str(Path(out) / report.scenario),
    }


def cmd_run(args) -> int:
    detail = args.event_detail or config.event_detail
    workers = args.workers or config.workers
    jobs = [(str(p), args.seed, str(args.out), detail) for p in args.scenarios]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, *zip(*jobs)))
    else:
        results = [_run_one(*job) for job in jobs]

    for result in sorted(results, key=lambda r: r["scenario"]):
        recovered = result["recovered_fraction"]
        logger.info(f"✓ {result['scenario']} (seed {result['seed']}): loss {result['loss_rate']:.2%}, "
                    f"recovered {'n/a' if recovered is None else f'{recovered:.2%}'} -> {result['out']}")
    return EXIT_OK


def cmd_validate(args) -> int:
    status = EXIT_OK
    for path in args.scenarios:
        try:
            scenario = load_scenario(path)
        except CloudQosError as exc:
            logger.error(f"❌ {exc}")
            status = EXIT_INVALID
            continue
        logger.info(f"✓ {path}: '{scenario.name}' with {len(scenario.flows)} flows, "
                    f"{len(scenario.topology.links)} links")
    return status


def _parse_levels(raw: str) -> List[int]:
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated parity counts, got {raw!r}")


def cmd_whatif(args) -> int:
    coding_rate = None
    if args.summary is not None:
        try:
            coding_rate = json.loads(Path(args.summary).read_text()).get("coding_recovery_rate")
        except (OSError, json.JSONDecodeError) as exc:
            logger.error(f"❌ cannot read summary {args.summary}: {exc}")
            return EXIT_INVALID
    result = fec_whatif(load_trace(args.trace), args.levels, coding_rate=coding_rate)
    print(json.dumps(result.to_dict(), sort_keys=True, indent=2))
    return EXIT_OK


def cmd_feasibility(args) -> int:
    rows = load_dataset(args.dataset)
    report = feasibility_analysis(rows, args.budget_ms, args.delta_ms)
    if args.out is not None:
        out = report.write(args.out)
        logger.info(f"💾 feasibility tables written to {out}")
    print(report.within_budget.to_string(index=False))
    return EXIT_OK


def cmd_cost(args) -> int:
    price = args.egress_price if args.egress_price is not None else config.egress_price
    model = CostModel(loss_rate=args.loss_rate, **({"egress_price": price} if price is not None else {}))
    params = CodingParams(r=args.r) if args.r is not None else CodingParams()
    rate = aggregate_rate_gb_per_hour(args.calls, args.mbps)
    table = cost_table(rate, params, model)
    logger.info(f"{args.calls} calls x {args.mbps} Mbps = {rate:.2f} GB/hour")
    for service, dollars in table.items():
        print(f"{service:>18}: ${dollars:.2f}/hour")
    coding = table[ServiceKind.CODING.value]
    if coding > 0:
        print(f"{'forwarding/coding':>18}: {table[ServiceKind.FORWARDING.value] / coding:.1f}x")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudqos", description=__doc__)
    parser.add_argument("--log-level", default=None, help="Overrides CLOUDQOS_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Simulate one or more scenario files")
    run.add_argument("scenarios", nargs="+", type=Path)
    run.add_argument("--seed", type=int, default=None, help="Overrides the scenario seed")
    run.add_argument("--out", type=Path, default=config.output_dir)
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--event-detail", choices=["standard", "full"], default=None)
    run.set_defaults(func=cmd_run)

    validate = sub.add_parser("validate", help="Check scenario files without running them")
    validate.add_argument("scenarios", nargs="+", type=Path)
    validate.set_defaults(func=cmd_validate)

    whatif = sub.add_parser("whatif", help="On-path FEC what-if over a direct_trace.csv")
    whatif.add_argument("trace", type=Path)
    whatif.add_argument("--levels", type=_parse_levels, default=list(DEFAULT_LEVELS),
                        help="Parities per 5-packet block, e.g. 1,2,5")
    whatif.add_argument("--summary", type=Path, default=None,
                        help="summary.json of the coding run to compare against")
    whatif.set_defaults(func=cmd_whatif)

    feasibility = sub.add_parser("feasibility", help="Service delays over a latency dataset")
    feasibility.add_argument("dataset", type=Path)
    feasibility.add_argument("--budget-ms", type=float, default=200.0)
    feasibility.add_argument("--delta-ms", type=float, default=0.0, help="DC2 wait for rows without one")
    feasibility.add_argument("--out", type=Path, default=None)
    feasibility.set_defaults(func=cmd_feasibility)

    cost = sub.add_parser("cost", help="Hourly bandwidth cost per service")
    cost.add_argument("--calls", type=int, default=150)
    cost.add_argument("--mbps", type=float, default=1.5)
    cost.add_argument("--r", type=float, default=1 / 15, help="Cross-stream coding rate")
    cost.add_argument("--egress-price", type=float, default=None)
    cost.add_argument("--loss-rate", type=float, default=0.0)
    cost.set_defaults(func=cmd_cost)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    if not config.validate():
        return EXIT_INVALID
    try:
        return args.func(args)
    except (CloudQosError, ValueError) as exc:
        logger.error(f"❌ {exc}")
        return EXIT_INVALID
    except Exception:
        logger.exception("💥 unexpected failure")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
