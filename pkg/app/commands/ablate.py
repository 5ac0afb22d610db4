"""``ablate``: train and evaluate every variant of one switch."""

import argparse
import logging
from pathlib import Path

from app.commands.common import add_config_args, add_data_arg, dtype_of, load_splits, run_config
from app.knowledge_base.presets import ABLATION_SWITCHES
from app.services.ablation import check_structure, format_table, run_ablation
from app.settings import AppSettings

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("ablate", help="run an ablation sweep")
    add_config_args(parser)
    add_data_arg(parser)
    parser.add_argument("--switch", choices=ABLATION_SWITCHES, required=True)
    parser.add_argument("--scale", choices=["full", "toy", "micro"], default="toy",
                        help="which k-schedule table to sweep")
    parser.add_argument("--out", type=Path, help="output directory (default <out_dir>/ablate/<switch>)")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, settings: AppSettings) -> int:
    model_config, training_config = run_config(args)
    train_data, eval_data = load_splits(args.data)
    out = args.out or Path(settings.out_dir) / "ablate" / args.switch
    logger.info(f"Ablating {args.switch} at {args.scale} scale into {out}")
    rows = run_ablation(
        model_config, training_config, args.switch, train_data, eval_data,
        out, args.scale, dtype_of(args, settings),
    )
    check_structure(rows)
    print(format_table(rows))
    return 0
