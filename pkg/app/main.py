"""Command-line entry point: ``python -m app.main <command> ...``."""

import argparse
import logging
import os
import sys
from typing import List, Optional

from app.settings import AppSettings, get_settings

BLAS_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def pin_blas_threads(settings: AppSettings) -> None:
    """One BLAS thread in deterministic mode; values already in the environment win."""
    if settings.deterministic:
        for var in BLAS_THREAD_VARS:
            os.environ.setdefault(var, "1")


# must run before numpy is first imported
pin_blas_threads(get_settings())

from app.commands import ablate, dump_attn, evaluate, gen_data, grad_check, train  # noqa: E402
from app.exceptions import ModelError  # noqa: E402

logger = logging.getLogger(__name__)

COMMANDS = (gen_data, train, evaluate, grad_check, dump_attn, ablate)
EXIT_MODEL_ERROR = 2


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def build_parser(settings: AppSettings) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msformer",
        description="Multi-scale patch selection and cross-attention on a small ViT",
    )
    parser.add_argument("--precision", choices=["f32", "f64"], default=settings.precision)
    parser.add_argument("--deterministic", type=_on_off, default=settings.deterministic, metavar="{on,off}")
    parser.add_argument("--log-level", default=settings.log_level)
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    settings = get_settings()
    args = build_parser(settings).parse_args(argv)

    logging.basicConfig(
        level=args.log_level.upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    logger.debug(f"Running {args.command} at {args.precision}")

    try:
        return args.handler(args, settings)
    except ModelError as exc:
        logger.error(f"{args.command} failed: {type(exc).__name__}: {exc}", exc_info=True)
        return EXIT_MODEL_ERROR


if __name__ == "__main__":
    sys.exit(main())
