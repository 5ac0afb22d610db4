"""``gen-data``: write the synthetic train and eval splits."""

import argparse
import logging
from pathlib import Path

from app.knowledge_base.presets import TOY
from app.services.dataset import generate_splits
from app.settings import AppSettings

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("gen-data", help="generate the synthetic dataset")
    parser.add_argument("--out", type=Path, help="output directory (default <out_dir>/data)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--classes", type=int, default=TOY["num_classes"])
    parser.add_argument("--per-class", type=int, default=64)
    parser.add_argument("--eval-per-class", type=int, default=16)
    parser.add_argument("--image-size", type=int, default=TOY["input_size"])
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, settings: AppSettings) -> int:
    out = args.out or Path(settings.out_dir) / "data"
    logger.info(f"Generating {args.classes} classes at {args.image_size}px into {out}")
    train_path, eval_path, probe = generate_splits(
        out, args.classes, args.per_class, args.image_size, args.seed, args.eval_per_class
    )
    print(f"train: {train_path}")
    print(f"eval: {eval_path}")
    print(f"mean-colour probe accuracy: {probe:.3f}")
    return 0
