"""Synthetic class-signature images and their on-disk container.

Every class is a fixed colour, shape and stripe orientation. Each sample
draws that signature at a random position and a random side length in
[image_size/8, image_size/1.5] over a low-noise grey background, so the
label never depends on pose or scale and the bounding box is known exactly.

Container layout (little-endian)::

    header   magic "MSFD", version u32, count u32, h u32, w u32, channels u32
    record   label u32, bbox 4×u32 (x, y, w, h), pixels h·w·c f32

The JSON index next to the container lists record offsets, labels and boxes.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from app.exceptions import ConfigError, DatasetError, VersionError
from app.models.records import SyntheticSample
from app.services import tensor_core as tc

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"MSFD"
DATASET_VERSION = 1
HEADER = struct.Struct("<4sIIIII")
CHANNELS = 3
BACKGROUND = 0.5
NOISE_STD = 0.03
SHAPES = ("square", "disk", "diamond")
PROBE_TARGET = 0.9


def record_dtype(h: int, w: int, c: int = CHANNELS) -> np.dtype:
    return np.dtype([("label", "<u4"), ("bbox", "<u4", (4,)), ("pixels", "<f4", (h, w, c))])


@dataclass
class Dataset:
    images: np.ndarray                # (N, H, W, C) float32
    labels: np.ndarray                # (N,) int64
    bboxes: np.ndarray                # (N, 4) int64, x y w h

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def class_signature(label: int, n_classes: int) -> Dict[str, object]:
    """Colour, shape and stripe angle of a class."""
    hue = label / n_classes
    # saturated colour on the hue circle, pushed away from the grey background
    rgb = np.array([0.5 + 0.45 * math.cos(2 * math.pi * (hue - k / 3)) for k in range(3)], dtype=np.float32)
    return {
        "color": rgb,
        "shape": SHAPES[label % len(SHAPES)],
        "angle": math.pi * (label % 4) / 4,
    }


def _shape_mask(shape: str, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
    u = (xx + 0.5) / side * 2 - 1
    v = (yy + 0.5) / side * 2 - 1
    if shape == "disk":
        return u * u + v * v <= 1.0
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    return np.ones((side, side), dtype=bool)


def render_sample(label: int, n_classes: int, image_size: int, rng: np.random.Generator) -> SyntheticSample:
    sig = class_signature(label, n_classes)
    lo, hi = image_size // 8, int(image_size / 1.5)
    side = int(rng.integers(lo, hi + 1))
    x = int(rng.integers(0, image_size - side + 1))
    y = int(rng.integers(0, image_size - side + 1))

    image = BACKGROUND + NOISE_STD * rng.standard_normal((image_size, image_size, CHANNELS))
    yy, xx = np.mgrid[0:side, 0:side]
    phase = (xx * math.cos(sig["angle"]) + yy * math.sin(sig["angle"])) * (8 * math.pi / side)
    stripes = 0.8 + 0.2 * np.sign(np.sin(phase))
    patch = sig["color"][None, None, :] * stripes[..., None]
    mask = _shape_mask(sig["shape"], side)
    region = image[y:y + side, x:x + side]
    region[mask] = patch[mask]
    return SyntheticSample(image=np.clip(image, 0.0, 1.0).astype(np.float32), label=label, bbox=(x, y, side, side))


def generate_dataset(n_classes: int, n_per_class: int, image_size: int, seed: int) -> List[SyntheticSample]:
    """Deterministic samples, class-interleaved: sample i has label i mod n_classes."""
    if image_size % 32 != 0:
        raise ConfigError(f"image_size must be divisible by 32, got {image_size}")
    if n_classes < 2 or n_per_class < 1:
        raise ConfigError(f"need at least 2 classes and 1 sample per class, got {n_classes}x{n_per_class}")
    rng = tc.make_rng(seed)
    return [
        render_sample(label, n_classes, image_size, rng)
        for _ in range(n_per_class)
        for label in range(n_classes)
    ]


def write_dataset(path: Path, samples: List[SyntheticSample]) -> Path:
    """Write the container at ``path`` and its index at ``path.with_suffix('.json')``."""
    path = Path(path)
    if not samples:
        raise DatasetError(f"{path}: refusing to write an empty dataset")
    h, w, c = samples[0].image.shape
    records = np.zeros(len(samples), dtype=record_dtype(h, w, c))
    for i, sample in enumerate(samples):
        records[i]["label"] = sample.label
        records[i]["bbox"] = sample.bbox
        records[i]["pixels"] = sample.image
    index = {
        "version": DATASET_VERSION,
        "count": len(samples),
        "shape": [h, w, c],
        "record_size": records.dtype.itemsize,
        "offsets": [HEADER.size + i * records.dtype.itemsize for i in range(len(samples))],
        "labels": [int(s.label) for s in samples],
        "bboxes": [list(map(int, s.bbox)) for s in samples],
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(samples), h, w, c))
            fh.write(records.tobytes())
        index_path = path.with_suffix(".json")
        index_path.write_text(json.dumps(index, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"Cannot write dataset {path}: {exc}") from exc
    logger.info(f"Dataset written: {path} ({len(samples)} records, {h}x{w}x{c})")
    return index_path


def load_dataset(path: Path) -> Dataset:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"Cannot read dataset {path}: {exc}") from exc
    if len(data) < HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, count, h, w, c = HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise DatasetError(f"{path}: not a dataset container (magic {magic!r})")
    if version != DATASET_VERSION:
        raise VersionError(f"{path}: dataset version {version}, expected {DATASET_VERSION}")
    dtype = record_dtype(h, w, c)
    if len(data) != HEADER.size + count * dtype.itemsize:
        raise DatasetError(f"{path}: expected {count} records of {dtype.itemsize} bytes")
    records = np.frombuffer(data, dtype=dtype, count=count, offset=HEADER.size)

    index_path = path.with_suffix(".json")
    if index_path.exists():
        index = json.loads(index_path.read_text(encoding="utf-8"))
        if index.get("count") != count:
            raise DatasetError(f"{index_path}: index lists {index.get('count')} records, container has {count}")

    return Dataset(
        images=np.ascontiguousarray(records["pixels"]).astype(np.float32),
        labels=records["label"].astype(np.int64),
        bboxes=records["bbox"].astype(np.int64),
    )


def mean_color_features(images: np.ndarray, downscale: int = 2) -> np.ndarray:
    """Per-image mean RGB after an r×r average downscale."""
    return tc.block_mean(images.astype(np.float64), downscale).mean(axis=(1, 2))


def linear_probe_accuracy(images: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """Least-squares one-vs-all linear probe on mean colour; training accuracy.

    The colour offset from the grey background is scaled to unit length, so
    object size only changes its magnitude and not the probe's input.
    """
    offset = mean_color_features(images) - BACKGROUND
    feats = offset / np.maximum(np.linalg.norm(offset, axis=1, keepdims=True), 1e-12)
    design = np.concatenate([feats, np.ones((feats.shape[0], 1))], axis=1)
    targets = np.eye(n_classes)[labels]
    weights, *_ = np.linalg.lstsq(design, targets, rcond=None)
    return float(np.mean(np.argmax(design @ weights, axis=1) == labels))


def generate_splits(
    out_dir: Path, n_classes: int, n_per_class: int, image_size: int, seed: int, eval_per_class: int
) -> Tuple[Path, Path, float]:
    """Write ``train.bin`` and ``eval.bin`` from independent child seeds and run the probe."""
    out_dir = Path(out_dir)
    train_seed, eval_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2))
    train = generate_dataset(n_classes, n_per_class, image_size, train_seed)
    held_out = generate_dataset(n_classes, eval_per_class, image_size, eval_seed)
    train_path, eval_path = out_dir / "train.bin", out_dir / "eval.bin"
    write_dataset(train_path, train)
    write_dataset(eval_path, held_out)

    images = np.stack([s.image for s in train])
    labels = np.array([s.label for s in train])
    probe = linear_probe_accuracy(images, labels, n_classes)
    if probe < PROBE_TARGET:
        logger.warning(f"Linear probe on mean colour reached {probe:.3f} (< {PROBE_TARGET})")
    else:
        logger.info(f"Linear probe on mean colour: {probe:.3f}")
    return train_path, eval_path, probe
