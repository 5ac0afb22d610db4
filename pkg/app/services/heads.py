"""Classifier heads, smoothed labels, the summed loss and inference aggregation."""

import logging
from typing import Dict, Sequence, Tuple

import numpy as np

from app.exceptions import DimensionError, LabelError
from app.models.config import NUM_STAGES, ModelConfig
from app.models.records import PredictionSet, SmoothedLabel
from app.services import tensor_core as tc
from app.services.params import ParamInitializer, ParamStore, accumulate

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
CONCAT_HEAD = "concat"
BACKBONE_HEAD = "backbone"


def head_alpha(alpha_schedule: Sequence[float], head: str) -> float:
    """α for a head: stage i takes the i-th entry, the joint heads take the last."""
    if head.startswith("stage"):
        return float(alpha_schedule[int(head[len("stage"):]) - 1])
    return float(alpha_schedule[NUM_STAGES])


def smoothed_label(target: int, alpha: float, num_classes: int) -> SmoothedLabel:
    """ŷ[t̂] = α and ŷ[t] = (1−α)/n elsewhere; deliberately not renormalized."""
    if not 0 <= target < num_classes:
        raise LabelError(f"target {target} out of range [0, {num_classes})")
    if not 0.0 <= alpha <= 1.0:
        raise LabelError(f"alpha {alpha} outside [0, 1]")
    vector = np.full(num_classes, (1.0 - alpha) / num_classes, dtype=np.float64)
    vector[target] = alpha
    return SmoothedLabel(vector=vector, alpha=float(alpha), target=int(target))


def _label_matrix(targets: np.ndarray, alpha: float, num_classes: int, dtype) -> np.ndarray:
    return np.stack([smoothed_label(int(t), alpha, num_classes).vector for t in targets]).astype(dtype)


def _check_targets(predictions: PredictionSet, targets: np.ndarray) -> None:
    for name, probs in predictions.probs.items():
        if probs.shape[0] != targets.shape[0]:
            raise DimensionError(f"head {name}: {probs.shape[0]} predictions for {targets.shape[0]} targets")


def total_loss(predictions: PredictionSet, targets: np.ndarray, alpha_schedule: Sequence[float]) -> float:
    """Batch mean of Σ_heads Σ_t −ŷ_t log y_t, with y clamped at 1e-12."""
    targets = np.asarray(targets)
    _check_targets(predictions, targets)
    per_sample = 0.0
    for name, probs in predictions.probs.items():
        labels = _label_matrix(targets, head_alpha(alpha_schedule, name), probs.shape[-1], probs.dtype)
        per_sample = per_sample - (labels * np.log(np.maximum(probs, LOG_CLAMP))).sum(axis=-1)
    return float(np.mean(per_sample))


def total_loss_backward(
    predictions: PredictionSet, targets: np.ndarray, alpha_schedule: Sequence[float]
) -> Dict[str, np.ndarray]:
    """∂L/∂z per head.

    Where no probability is clamped this is y·Σŷ − ŷ; the label does not
    sum to one, so the first term keeps its factor. Clamped entries carry no
    gradient.
    """
    targets = np.asarray(targets)
    batch = targets.shape[0]
    grads = {}
    for name, probs in predictions.probs.items():
        labels = _label_matrix(targets, head_alpha(alpha_schedule, name), probs.shape[-1], probs.dtype)
        live = labels * (probs > LOG_CLAMP)
        grads[name] = (probs * live.sum(axis=-1, keepdims=True) - live) / batch
    return grads


def aggregate_inference(predictions: PredictionSet) -> np.ndarray:
    """argmax of the summed head probabilities per sample; ties go to the lowest class."""
    y_all = sum(predictions.probs[name] for name in predictions.heads)
    return np.argmax(y_all, axis=-1)


def head_accuracy(predictions: PredictionSet, targets: np.ndarray) -> Dict[str, float]:
    targets = np.asarray(targets)
    return {name: float(np.mean(np.argmax(p, axis=-1) == targets)) for name, p in predictions.probs.items()}


def aggregate_accuracy(predictions: PredictionSet, targets: np.ndarray) -> float:
    return float(np.mean(aggregate_inference(predictions) == np.asarray(targets)))


class ClassifierHeads:
    """Linear heads on the CLS rows of the MSCA outputs.

    One head per active stage plus the concatenated head; with no active
    stage a single head reads CLS_g straight from the backbone. In
    ``global_pool`` mode the heads read the row mean instead of a CLS row.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.stages = list(config.msps_stages)

    @property
    def names(self) -> Tuple[str, ...]:
        if not self.stages:
            return (BACKBONE_HEAD,)
        return tuple(f"stage{s}" for s in self.stages) + (CONCAT_HEAD,)

    def init_params(self, init: ParamInitializer) -> None:
        cfg = self.config
        n = cfg.num_classes
        if not self.stages:
            init.weight(f"heads.{BACKBONE_HEAD}.weight", (cfg.channels(NUM_STAGES), n))
            init.zeros(f"heads.{BACKBONE_HEAD}.bias", (n,))
            return
        for s in self.stages:
            init.weight(f"heads.stage{s}.weight", (cfg.channels(s), n))
            init.zeros(f"heads.stage{s}.bias", (n,))
        init.weight(f"heads.{CONCAT_HEAD}.weight", (cfg.concat_width, n))
        init.zeros(f"heads.{CONCAT_HEAD}.bias", (n,))

    def _readout(self, tokens: np.ndarray) -> np.ndarray:
        if self.config.uses_cls:
            return np.ascontiguousarray(tokens[:, -1])
        return tc.mean(tokens, axis=1)

    def _readout_backward(self, grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        if self.config.uses_cls:
            out = np.zeros(shape, dtype=grad.dtype)
            out[:, -1] = grad
            return out
        return tc.mean_backward(grad, shape, axis=1)

    @staticmethod
    def _prediction(logits: Dict[str, np.ndarray]) -> PredictionSet:
        return PredictionSet(logits=logits, probs={k: tc.softmax_rows(z) for k, z in logits.items()})

    def stage_predictions(
        self, params: ParamStore, outputs: Dict[int, np.ndarray]
    ) -> Tuple[PredictionSet, dict]:
        """z_i = linear(CLS̄_i) per stage and z_con = linear(concat(CLS̄_i))."""
        features = {s: self._readout(outputs[s]) for s in self.stages}
        joint = tc.concat([features[s] for s in self.stages], axis=-1)
        logits = {
            f"stage{s}": tc.linear(features[s], params[f"heads.stage{s}.weight"], params[f"heads.stage{s}.bias"])
            for s in self.stages
        }
        logits[CONCAT_HEAD] = tc.linear(joint, params[f"heads.{CONCAT_HEAD}.weight"], params[f"heads.{CONCAT_HEAD}.bias"])
        cache = {"features": features, "joint": joint, "shapes": {s: outputs[s].shape for s in self.stages}}
        return self._prediction(logits), cache

    def stage_predictions_backward(
        self, params: ParamStore, grad_logits: Dict[str, np.ndarray], cache: dict, grads: ParamStore
    ) -> Dict[int, np.ndarray]:
        """Gradients w.r.t. the MSCA outputs Õ_i."""
        features = cache["features"]
        g_joint, g_w, g_b = tc.linear_backward(
            grad_logits[CONCAT_HEAD], cache["joint"], params[f"heads.{CONCAT_HEAD}.weight"], True
        )
        accumulate(grads, f"heads.{CONCAT_HEAD}.weight", g_w)
        accumulate(grads, f"heads.{CONCAT_HEAD}.bias", g_b)
        widths = [features[s].shape[-1] for s in self.stages]
        joint_parts = dict(zip(self.stages, tc.split(g_joint, widths, axis=-1)))

        grad_outputs = {}
        for s in self.stages:
            g_f, g_w, g_b = tc.linear_backward(
                grad_logits[f"stage{s}"], features[s], params[f"heads.stage{s}.weight"], True
            )
            accumulate(grads, f"heads.stage{s}.weight", g_w)
            accumulate(grads, f"heads.stage{s}.bias", g_b)
            grad_outputs[s] = self._readout_backward(g_f + joint_parts[s], cache["shapes"][s])
        return grad_outputs

    def backbone_prediction(self, params: ParamStore, cls_g: np.ndarray) -> Tuple[PredictionSet, np.ndarray]:
        logits = tc.linear(cls_g, params[f"heads.{BACKBONE_HEAD}.weight"], params[f"heads.{BACKBONE_HEAD}.bias"])
        return self._prediction({BACKBONE_HEAD: logits}), cls_g

    def backbone_prediction_backward(
        self, params: ParamStore, grad_logits: Dict[str, np.ndarray], cls_g: np.ndarray, grads: ParamStore
    ) -> np.ndarray:
        g_cls, g_w, g_b = tc.linear_backward(
            grad_logits[BACKBONE_HEAD], cls_g, params[f"heads.{BACKBONE_HEAD}.weight"], True
        )
        accumulate(grads, f"heads.{BACKBONE_HEAD}.weight", g_w)
        accumulate(grads, f"heads.{BACKBONE_HEAD}.bias", g_b)
        return g_cls
