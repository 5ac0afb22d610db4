"""Parameter storage, initialization, forward context and checkpoint files.

Parameters and BN running statistics live in flat ordered dicts keyed by
dotted names such as ``stage2.block0.attn.qkv.weight``. Checkpoints are a flat
list of ``(name, shape, little-endian payload)`` records behind a versioned
header; see MODEL_ARCHITECTURE.md for the byte layout.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from app.exceptions import VersionError
from app.models.config import ModelConfig, build_model_config, canonical_json, config_hash

logger = logging.getLogger(__name__)

ParamStore = Dict[str, np.ndarray]

CHECKPOINT_MAGIC = b"MSFC"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_KIND_PARAM, _KIND_BUFFER = 0, 1


class ParamInitializer:
    """Collects freshly initialized tensors in registration order.

    Weights are truncated normal (σ = ``std``, cut at 2σ), biases and BN
    shifts zero, norm scales one, running variances one.
    """

    def __init__(self, rng: np.random.Generator, dtype: np.dtype, std: float = 0.02):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.std = std
        self.params: ParamStore = {}
        self.buffers: ParamStore = {}

    def _truncated_normal(self, shape: Tuple[int, ...], std: float) -> np.ndarray:
        out = self.rng.standard_normal(shape)
        bad = np.abs(out) > 2.0
        while bad.any():
            out[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(out) > 2.0
        return (out * std).astype(self.dtype)

    def weight(self, name: str, shape: Tuple[int, ...], std: Optional[float] = None) -> None:
        self.params[name] = self._truncated_normal(shape, self.std if std is None else std)

    def zeros(self, name: str, shape: Tuple[int, ...]) -> None:
        self.params[name] = np.zeros(shape, dtype=self.dtype)

    def ones(self, name: str, shape: Tuple[int, ...]) -> None:
        self.params[name] = np.ones(shape, dtype=self.dtype)

    def norm(self, prefix: str, width: int) -> None:
        self.ones(f"{prefix}.weight", (width,))
        self.zeros(f"{prefix}.bias", (width,))

    def batch_norm(self, prefix: str, width: int) -> None:
        self.norm(prefix, width)
        self.buffers[f"{prefix}.running_mean"] = np.zeros((width,), dtype=self.dtype)
        self.buffers[f"{prefix}.running_var"] = np.ones((width,), dtype=self.dtype)


@dataclass
class ForwardContext:
    """Per-call switches plus the sink for BN running-statistic updates."""
    buffers: ParamStore
    training: bool = True
    keep_cache: bool = True
    retain_maps: bool = False
    buffer_updates: ParamStore = field(default_factory=dict)

    def running_stats(self, prefix: str) -> Tuple[np.ndarray, np.ndarray]:
        return self.buffers[f"{prefix}.running_mean"], self.buffers[f"{prefix}.running_var"]

    def record_stats(self, prefix: str, stats: Tuple[np.ndarray, np.ndarray]) -> None:
        if self.training:
            self.buffer_updates[f"{prefix}.running_mean"] = stats[0]
            self.buffer_updates[f"{prefix}.running_var"] = stats[1]


def accumulate(grads: ParamStore, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


def count_parameters(params: ParamStore) -> int:
    return int(sum(p.size for p in params.values()))


@dataclass
class Checkpoint:
    config: ModelConfig
    config_hash: str
    params: ParamStore
    buffers: ParamStore


def save_checkpoint(path: Path, config: ModelConfig, params: ParamStore, buffers: ParamStore) -> None:
    """Write params and buffers with a header carrying the config and its hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config_json = canonical_json(config).encode("utf-8")
    digest = config_hash(config).encode("ascii")
    records = [(_KIND_PARAM, n, a) for n, a in params.items()]
    records += [(_KIND_BUFFER, n, a) for n, a in buffers.items()]

    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        fh.write(struct.pack("<64sI", digest, len(config_json)))
        fh.write(config_json)
        fh.write(struct.pack("<I", len(records)))
        for kind, name, arr in records:
            encoded = name.encode("utf-8")
            code = _DTYPE_CODES[arr.dtype]
            fh.write(struct.pack("<BH", kind, len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    logger.info(f"Checkpoint written: {path} ({len(records)} tensors)")


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint and refuse it if the stored hash does not match its config."""
    path = Path(path)
    data = path.read_bytes()
    offset = 0

    def take(fmt: str):
        nonlocal offset
        values = struct.unpack_from(fmt, data, offset)
        offset += struct.calcsize(fmt)
        return values

    magic, version = take("<4sI")
    if magic != CHECKPOINT_MAGIC:
        raise VersionError(f"{path} is not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    digest, json_len = take("<64sI")
    config_data = json.loads(data[offset:offset + json_len].decode("utf-8"))
    offset += json_len
    config = build_model_config(config_data)
    stored_hash = digest.decode("ascii")
    if config_hash(config) != stored_hash:
        raise VersionError(f"{path}: stored config hash {stored_hash[:12]} does not match its config")

    (count,) = take("<I")
    params: ParamStore = {}
    buffers: ParamStore = {}
    for _ in range(count):
        kind, name_len = take("<BH")
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        code, ndim = take("<BB")
        shape = take(f"<{ndim}I")
        dtype = _CODE_DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize, offset=offset)
        offset += size
        target = params if kind == _KIND_PARAM else buffers
        target[name] = arr.reshape(shape).astype(dtype.newbyteorder("="))
    logger.info(f"Checkpoint loaded: {path} ({len(params)} params, {len(buffers)} buffers)")
    return Checkpoint(config=config, config_hash=stored_hash, params=params, buffers=buffers)
