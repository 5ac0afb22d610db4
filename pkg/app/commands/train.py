"""``train``: fit a model and write checkpoint and metrics."""

import argparse
import logging
from pathlib import Path

from app.commands.common import add_config_args, add_data_arg, dtype_of, load_splits, run_config
from app.services.training import Trainer
from app.settings import AppSettings

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="train a model")
    add_config_args(parser)
    add_data_arg(parser)
    parser.add_argument("--out", type=Path, help="run directory (default <out_dir>/train)")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, settings: AppSettings) -> int:
    model_config, training_config = run_config(args)
    train_data, eval_data = load_splits(args.data)
    out = args.out or Path(settings.out_dir) / "train"
    logger.info(f"Training {training_config.steps} steps on {len(train_data)} samples into {out}")
    trainer = Trainer(model_config, training_config, dtype=dtype_of(args, settings), out_dir=out)
    result = trainer.train(train_data, eval_data)
    last = result.metrics[-1]
    print(f"final loss {result.final_loss:.4f}, {last.split} aggregate accuracy {last.aggregate_accuracy:.3f}")
    print(f"run directory: {out}")
    return 0
