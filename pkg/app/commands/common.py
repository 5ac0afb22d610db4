"""Argument helpers shared by the subcommands."""

import argparse
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from app.exceptions import DatasetError
from app.knowledge_base.presets import PRESETS, TOY_TRAINING, ModelPresets
from app.models.config import ModelConfig, TrainingConfig, load_run_config, split_run_config, with_overrides
from app.services import tensor_core as tc
from app.services.dataset import Dataset, load_dataset
from app.settings import AppSettings


def add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="flat JSON run config")
    parser.add_argument("--preset", choices=sorted(PRESETS), default="toy", help="used when --config is absent")
    parser.add_argument("--seed", type=int, help="overrides the config seed")


def add_data_arg(parser: argparse.ArgumentParser, required: bool = True) -> None:
    parser.add_argument("--data", type=Path, required=required,
                        help="dataset container, or a directory holding train.bin/eval.bin")


def run_config(args: argparse.Namespace) -> Tuple[ModelConfig, TrainingConfig]:
    """Model and training config from ``--config`` or ``--preset``, with ``--seed`` applied."""
    if args.config:
        model, training = load_run_config(args.config)
    else:
        model, training = split_run_config({**ModelPresets.get(args.preset), **TOY_TRAINING})
    if args.seed is not None:
        model = with_overrides(model, seed=args.seed)
    return model, training


def dtype_of(args: argparse.Namespace, settings: AppSettings) -> np.dtype:
    return tc.resolve_dtype(args.precision or settings.precision)


def load_splits(path: Path) -> Tuple[Dataset, Optional[Dataset]]:
    """Train split plus the eval split when ``path`` is a directory that has one."""
    path = Path(path)
    if path.is_dir():
        train_path, eval_path = path / "train.bin", path / "eval.bin"
        if not train_path.exists():
            raise DatasetError(f"{path} has no train.bin")
        return load_dataset(train_path), load_dataset(eval_path) if eval_path.exists() else None
    return load_dataset(path), None


def eval_split(path: Path) -> Dataset:
    """The eval split of a data directory, or the container itself."""
    path = Path(path)
    if path.is_dir():
        return load_dataset(path / "eval.bin")
    return load_dataset(path)
