"""``eval``: accuracy of a checkpoint, overall and per scale bucket."""

import argparse
import logging
from pathlib import Path

from app.commands.common import add_data_arg, dtype_of, eval_split
from app.models.config import load_run_config
from app.services.training import evaluate_checkpoint
from app.settings import AppSettings

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="evaluate a checkpoint")
    parser.add_argument("--checkpoint", type=Path, required=True)
    add_data_arg(parser)
    parser.add_argument("--config", type=Path, help="refuse the checkpoint unless its config hash matches")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, settings: AppSettings) -> int:
    expected = load_run_config(args.config)[0] if args.config else None
    logger.info(f"Evaluating {args.checkpoint} on {args.data}")
    metrics = evaluate_checkpoint(args.checkpoint, eval_split(args.data), expected, dtype_of(args, settings))
    print(metrics.model_dump_json())
    return 0
