"""``dump-attn``: attention and selection dumps for one sample."""

import argparse
from pathlib import Path

from app.commands.common import add_data_arg
from app.services.dumps import dump_attention
from app.settings import AppSettings


def register(subparsers) -> None:
    parser = subparsers.add_parser("dump-attn", help="dump cross-attention maps and selection indices")
    parser.add_argument("--checkpoint", type=Path, required=True)
    add_data_arg(parser)
    parser.add_argument("--sample", type=int, default=0)
    parser.add_argument("--query-stage", type=int, default=4)
    parser.add_argument("--query-row", type=int, default=-1, help="negative counts from the end; -1 is the CLS row")
    parser.add_argument("--head", type=int, help="single head instead of the mean over heads")
    parser.add_argument("--block", type=int, default=0)
    parser.add_argument("--out", type=Path, help="output directory (default <out_dir>/dumps)")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, settings: AppSettings) -> int:
    data_path = args.data / "eval.bin" if args.data.is_dir() else args.data
    attention_path, selection_path = dump_attention(
        args.checkpoint, data_path, args.out or Path(settings.out_dir) / "dumps",
        args.sample, args.query_stage, args.query_row, args.head, args.block,
    )
    print(f"attention: {attention_path}")
    print(f"selection: {selection_path}")
    return 0
