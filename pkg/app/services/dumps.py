"""Attention-map and selection dumps for external plotting.

Attention file (little-endian)::

    magic "MSFA", version u32, block u32, sample u32, head i32, count u32
    count × (query_stage u32, query_row u32, key_stage u32, key_row u32,
             merged_grid_index i32, weight f32)

Selection file::

    magic "MSFS", version u32, sample u32, merge_factor u32, stages u32
    per stage: stage u32, k u32, merged_count u32,
               indices u32[k], scores f32[merged_count]

Each binary file gets a ``.txt`` sidecar with the same content as text.
"""

import logging
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from app.exceptions import TensorIndexError, VersionError
from app.models.records import AttentionDump, SelectionDump, SelectedSet
from app.services.crossattn import ATTENTION_RECORD_DTYPE, extract_attention_maps
from app.services.dataset import load_dataset
from app.services.model import MultiScaleModel
from app.services.params import ForwardContext, load_checkpoint

logger = logging.getLogger(__name__)

DUMP_VERSION = 1
ATTENTION_MAGIC = b"MSFA"
SELECTION_MAGIC = b"MSFS"
_ATTENTION_HEADER = struct.Struct("<4sIIIiI")
_SELECTION_HEADER = struct.Struct("<4sIIII")
_STAGE_HEADER = struct.Struct("<III")


def selection_dump(selections: dict, sample: int, batch_index: int = 0) -> SelectionDump:
    stages = sorted(selections)
    first: SelectedSet = selections[stages[0]]
    return SelectionDump(
        sample=sample,
        stages=stages,
        merge_factor=first.merge_factor,
        indices={s: selections[s].indices[batch_index].astype(np.uint32) for s in stages},
        scores={s: selections[s].scores[batch_index].astype(np.float32) for s in stages},
    )


def write_attention_dump(path: Path, dump: AttentionDump) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = np.ascontiguousarray(dump.records, dtype=ATTENTION_RECORD_DTYPE)
    with open(path, "wb") as fh:
        fh.write(_ATTENTION_HEADER.pack(ATTENTION_MAGIC, DUMP_VERSION, dump.block, dump.sample, dump.head, len(records)))
        fh.write(records.tobytes())
    lines = [f"block {dump.block} sample {dump.sample} head {dump.head} keys {len(records)}",
             "query_stage query_row key_stage key_row merged_grid_index weight"]
    lines += [
        f"{r['query_stage']} {r['query_row']} {r['key_stage']} {r['key_row']} {r['merged_grid_index']} {r['weight']:.6f}"
        for r in records
    ]
    path.with_suffix(".txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_attention_dump(path: Path) -> AttentionDump:
    data = Path(path).read_bytes()
    magic, version, block, sample, head, count = _ATTENTION_HEADER.unpack_from(data, 0)
    if magic != ATTENTION_MAGIC or version != DUMP_VERSION:
        raise VersionError(f"{path}: not a version {DUMP_VERSION} attention dump")
    records = np.frombuffer(data, dtype=ATTENTION_RECORD_DTYPE, count=count, offset=_ATTENTION_HEADER.size).copy()
    return AttentionDump(block=block, sample=sample, head=head, records=records)


def write_selection_dump(path: Path, dump: SelectionDump) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"sample {dump.sample} merge_factor {dump.merge_factor}"]
    with open(path, "wb") as fh:
        fh.write(_SELECTION_HEADER.pack(SELECTION_MAGIC, DUMP_VERSION, dump.sample, dump.merge_factor, len(dump.stages)))
        for s in dump.stages:
            indices = dump.indices[s].astype("<u4")
            scores = dump.scores[s].astype("<f4")
            fh.write(_STAGE_HEADER.pack(s, len(indices), len(scores)))
            fh.write(indices.tobytes())
            fh.write(scores.tobytes())
            lines.append(f"stage {s} k {len(indices)} merged {len(scores)}: " + " ".join(map(str, indices)))
    path.with_suffix(".txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_selection_dump(path: Path) -> SelectionDump:
    data = Path(path).read_bytes()
    magic, version, sample, merge_factor, count = _SELECTION_HEADER.unpack_from(data, 0)
    if magic != SELECTION_MAGIC or version != DUMP_VERSION:
        raise VersionError(f"{path}: not a version {DUMP_VERSION} selection dump")
    offset = _SELECTION_HEADER.size
    stages, indices, scores = [], {}, {}
    for _ in range(count):
        stage, k, merged = _STAGE_HEADER.unpack_from(data, offset)
        offset += _STAGE_HEADER.size
        indices[stage] = np.frombuffer(data, dtype="<u4", count=k, offset=offset).copy()
        offset += 4 * k
        scores[stage] = np.frombuffer(data, dtype="<f4", count=merged, offset=offset).copy()
        offset += 4 * merged
        stages.append(stage)
    return SelectionDump(sample=sample, stages=stages, merge_factor=merge_factor, indices=indices, scores=scores)


def dump_attention(
    checkpoint_path: Path,
    data_path: Path,
    out_dir: Path,
    sample: int,
    query_stage: int,
    query_row: int = -1,
    head: Optional[int] = None,
    block: int = 0,
) -> Tuple[Path, Path]:
    """Run one sample through a trained model and write both dumps.

    A negative ``query_row`` counts from the end, so -1 is the stage's CLS row.
    """
    checkpoint = load_checkpoint(checkpoint_path)
    data = load_dataset(data_path)
    if not 0 <= sample < len(data):
        raise TensorIndexError(f"sample {sample} out of range [0, {len(data)})")
    config = checkpoint.config
    if query_stage not in config.msps_stages:
        raise TensorIndexError(f"query stage {query_stage} is not an active selection stage {config.msps_stages}")
    if not 0 <= block < config.num_msca_blocks:
        raise TensorIndexError(f"block {block} out of range [0, {config.num_msca_blocks})")
    rows = config.rows(query_stage)
    row = query_row + rows if query_row < 0 else query_row

    dtype = next(iter(checkpoint.params.values())).dtype
    model = MultiScaleModel(config)
    ctx = ForwardContext(buffers=checkpoint.buffers, training=False, keep_cache=False, retain_maps=True)
    output = model.forward(checkpoint.params, ctx, data.images[sample:sample + 1].astype(dtype))

    attention = extract_attention_maps(output.states[block], output.selections, query_stage, row, 0, head, block)
    attention.sample = sample
    out_dir = Path(out_dir)
    attention_path = write_attention_dump(
        out_dir / f"attention_s{sample}_q{query_stage}-{row}_b{block}.bin", attention
    )
    selection_path = write_selection_dump(
        out_dir / f"selection_s{sample}.bin", selection_dump(output.selections, sample)
    )
    logger.info(f"Dumps written: {attention_path}, {selection_path}")
    return attention_path, selection_path
