"""Training loop, evaluation and scale-bucketed metrics.

A run directory holds ``config.json``, ``checkpoint.bin``, ``metrics.jsonl``
(one deterministic record per evaluation) and ``timing.jsonl`` (wall time,
kept apart so the metric stream is byte-identical across reruns).
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from app.exceptions import BucketingError, ConfigError, VersionError
from app.models.config import ModelConfig, TrainingConfig, config_hash, dump_run_config
from app.models.records import PredictionSet
from app.models.results import RunMetrics
from app.services import tensor_core as tc
from app.services.dataset import Dataset
from app.services.heads import aggregate_inference, head_accuracy
from app.services.model import MultiScaleModel
from app.services.optimizer import SGD, cosine_lr
from app.services.params import ForwardContext, ParamStore, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

BUCKETS = ("small", "medium", "large")
BATCH_ORDER_STREAM = 1
EVAL_BATCH = 16


def bucket_by_scale(bboxes: np.ndarray) -> np.ndarray:
    """Label every box small, medium or large by area quartiles.

    Quartiles use linear interpolation between order statistics (numpy's
    default, the inclusive method), so areas 1..8 give Q1=2.75 and Q3=6.25.
    Both comparisons are strict: a box at exactly Q1 or Q3 is medium.
    """
    bboxes = np.asarray(bboxes)
    if bboxes.ndim != 2 or bboxes.shape[0] < 4:
        raise BucketingError(f"need at least 4 boxes to compute quartiles, got {bboxes.shape[0] if bboxes.ndim else 0}")
    areas = bboxes[:, 2].astype(np.float64) * bboxes[:, 3].astype(np.float64)
    q1, q3 = np.quantile(np.sort(areas), [0.25, 0.75])
    labels = np.full(areas.shape[0], "medium", dtype="<U6")
    labels[areas < q1] = "small"
    labels[areas > q3] = "large"
    return labels


def compute_metrics(
    predictions: PredictionSet,
    labels: np.ndarray,
    bboxes: Optional[np.ndarray],
    step: int,
    split: str,
    seed: int,
    digest: str,
    losses: Optional[List[float]] = None,
    learning_rate: Optional[float] = None,
) -> RunMetrics:
    """Per-head, aggregate and per-bucket accuracy; empty buckets report ``None``."""
    correct = aggregate_inference(predictions) == labels
    bucket_accuracy: Dict[str, Optional[float]] = {}
    bucket_counts: Dict[str, int] = {}
    if bboxes is not None and len(labels) >= 4:
        buckets = bucket_by_scale(bboxes)
        for name in BUCKETS:
            members = buckets == name
            bucket_counts[name] = int(members.sum())
            if members.any():
                bucket_accuracy[name] = float(correct[members].mean())
            else:
                logger.warning(f"Bucket {name} is empty on split {split}")
                bucket_accuracy[name] = None
    return RunMetrics(
        step=step,
        split=split,
        losses=list(losses or []),
        learning_rate=learning_rate,
        head_accuracy=head_accuracy(predictions, labels),
        aggregate_accuracy=float(correct.mean()),
        bucket_accuracy=bucket_accuracy,
        bucket_counts=bucket_counts,
        seed=seed,
        config_hash=digest,
    )


class MetricsWriter:
    """Appends metric and timing records to the run directory."""

    def __init__(self, out_dir: Optional[Path]):
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "metrics.jsonl").write_text("", encoding="utf-8")
            (self.out_dir / "timing.jsonl").write_text("", encoding="utf-8")

    def write(self, metrics: RunMetrics) -> None:
        if not self.out_dir:
            return
        with open(self.out_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
            fh.write(metrics.model_dump_json() + "\n")
        with open(self.out_dir / "timing.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"step": metrics.step, "split": metrics.split, "wall_time": metrics.wall_time}) + "\n")


@dataclass
class TrainResult:
    params: ParamStore
    buffers: ParamStore
    metrics: List[RunMetrics] = field(default_factory=list)
    final_loss: Optional[float] = None


class Trainer:
    """Runs the fixed-length SGD loop for one model/training config pair."""

    def __init__(
        self,
        model_config: ModelConfig,
        training_config: TrainingConfig,
        dtype=np.float32,
        out_dir: Optional[Path] = None,
        init_std: float = 0.02,
    ):
        self.model_config = model_config
        self.training_config = training_config
        self.dtype = np.dtype(dtype)
        self.out_dir = Path(out_dir) if out_dir else None
        self.init_std = init_std
        self.model = MultiScaleModel(model_config)
        self.config_hash = config_hash(model_config)

    def _batches(self, n: int, batch: int):
        rng = tc.stream_rng(self.model_config.seed, BATCH_ORDER_STREAM)
        order, pos = rng.permutation(n), 0
        while True:
            if pos + batch > n:
                order, pos = rng.permutation(n), 0
            yield order[pos:pos + batch]
            pos += batch

    def evaluate(
        self,
        params: ParamStore,
        buffers: ParamStore,
        data: Dataset,
        step: int,
        split: str,
        losses: Optional[List[float]] = None,
        learning_rate: Optional[float] = None,
    ) -> RunMetrics:
        predictions = self.model.predict(params, buffers, data.images.astype(self.dtype), EVAL_BATCH)
        return compute_metrics(
            predictions, data.labels, data.bboxes, step, split,
            self.model_config.seed, self.config_hash, losses, learning_rate,
        )

    def train(self, train_data: Dataset, eval_data: Optional[Dataset] = None) -> TrainResult:
        cfg, tcfg = self.model_config, self.training_config
        batch = min(tcfg.batch_size, len(train_data))
        if batch < 2:
            raise ConfigError(f"training needs at least 2 samples per batch, dataset has {len(train_data)}")
        if train_data.images.shape[1:] != (cfg.input_size, cfg.input_size, cfg.in_channels):
            raise ConfigError(
                f"dataset images {train_data.images.shape[1:]} do not match input_size {cfg.input_size}"
            )

        params, buffers = self.model.init_params(self.dtype, self.init_std)
        optimizer = SGD.from_config(tcfg)
        writer = MetricsWriter(self.out_dir)
        if self.out_dir:
            (self.out_dir / "config.json").write_text(
                json.dumps(dump_run_config(cfg, tcfg), indent=2, sort_keys=True), encoding="utf-8"
            )
        images = train_data.images.astype(self.dtype)
        result = TrainResult(params=params, buffers=buffers)
        pending: List[float] = []
        started = time.perf_counter()
        logger.info(f"Training {tcfg.steps} steps, batch {batch}, config {self.config_hash[:12]}")

        batches = self._batches(len(train_data), batch)
        for step in range(tcfg.steps):
            idx = next(batches)
            lr = cosine_lr(step, tcfg.steps, tcfg.learning_rate, tcfg.warmup_steps)
            ctx = ForwardContext(buffers=buffers, training=True)
            loss, grads, _ = self.model.loss_and_grads(params, ctx, images[idx], train_data.labels[idx])
            optimizer.step(params, grads, lr)
            buffers.update(ctx.buffer_updates)
            pending.append(loss)
            result.final_loss = loss

            if step % tcfg.eval_interval == 0 or step == tcfg.steps - 1:
                splits = [("train", train_data)] + ([("eval", eval_data)] if eval_data is not None else [])
                for split, data in splits:
                    metrics = self.evaluate(
                        params, buffers, data, step, split,
                        pending if split == "train" else None, lr,
                    )
                    metrics.wall_time = time.perf_counter() - started
                    writer.write(metrics)
                    result.metrics.append(metrics)
                logger.info(
                    f"step {step}: loss {loss:.4f}, lr {lr:.5f}, "
                    f"train aggregate accuracy {result.metrics[-len(splits)].aggregate_accuracy:.3f}"
                )
                pending = []
                if self.out_dir:
                    save_checkpoint(self.out_dir / "checkpoint.bin", cfg, params, buffers)
        return result


def evaluate_checkpoint(
    checkpoint_path: Path, data: Dataset, expected: Optional[ModelConfig] = None, dtype=np.float32
) -> RunMetrics:
    """Load a checkpoint and report accuracy on ``data``.

    If ``expected`` is given its hash must equal the checkpoint's.
    """
    checkpoint = load_checkpoint(checkpoint_path)
    if expected is not None and config_hash(expected) != checkpoint.config_hash:
        raise VersionError(
            f"{checkpoint_path}: checkpoint config {checkpoint.config_hash[:12]} "
            f"does not match {config_hash(expected)[:12]}"
        )
    params = {k: v.astype(dtype) for k, v in checkpoint.params.items()}
    buffers = {k: v.astype(dtype) for k, v in checkpoint.buffers.items()}
    model = MultiScaleModel(checkpoint.config)
    predictions = model.predict(params, buffers, data.images.astype(dtype), EVAL_BATCH)
    return compute_metrics(
        predictions, data.labels, data.bboxes, step=-1, split="eval",
        seed=checkpoint.config.seed, digest=checkpoint.config_hash,
    )
