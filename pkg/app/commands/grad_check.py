"""``grad-check``: finite-difference reports for every custom block."""

import argparse
import logging
from pathlib import Path

from app.models.results import GradThresholds
from app.services.verify import BLOCKS, run_checks
from app.settings import AppSettings

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("grad-check", help="check analytic gradients against finite differences")
    parser.add_argument("--blocks", nargs="+", choices=list(BLOCKS) + ["model"], default=list(BLOCKS))
    parser.add_argument("--seeds", nargs="+", type=int, default=[1, 2, 3])
    parser.add_argument("--seed", type=int, help="check a single seed")
    parser.add_argument("--eps", type=float, default=1e-5)
    parser.add_argument("--rel-tol", type=float, default=1e-4)
    parser.add_argument("--max-coords", type=int, default=64)
    parser.add_argument("--out", type=Path, help="also write the reports to this file")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, settings: AppSettings) -> int:
    thresholds = GradThresholds(eps=args.eps, rel_tol=args.rel_tol, max_coords=args.max_coords)
    seeds = [args.seed] if args.seed is not None else args.seeds
    workers = 1 if args.deterministic else settings.grad_check_workers
    reports = run_checks(args.blocks, seeds, thresholds, workers)
    lines = [r.model_dump_json() for r in reports]
    for line in lines:
        print(line)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    failed = [f"{r.block}/{r.seed}" for r in reports if not r.passed]
    if failed:
        logger.error(f"Gradient checks failed: {', '.join(failed)}")
        return 1
    logger.info(f"All {len(reports)} gradient checks passed")
    return 0
