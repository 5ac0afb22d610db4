"""Multi-scale patch selection.

Each stage's grid is merged in r×r neighbourhoods, every merged patch is
scored by its mean activation, and the top-k patches are gathered. Selection
indices are constants for back-propagation: gradients reach the gathered
rows only.
"""

import logging
from typing import Tuple

import numpy as np

from app.exceptions import ConfigError, SelectionError
from app.models.config import ModelConfig
from app.models.records import SelectedSet, StageOutput
from app.services import tensor_core as tc

logger = logging.getLogger(__name__)


def merge_neighbors(features: np.ndarray, r: int) -> np.ndarray:
    """``(B, h, w, c)`` -> ``(B, h·w/r², c)``; row g is the mean of block g in row-major order."""
    b, h, w, c = features.shape
    if h % r or w % r:
        raise ConfigError(f"grid {h}x{w} not divisible by merge factor {r}")
    return tc.block_mean(features, r).reshape(b, (h // r) * (w // r), c)


def merge_neighbors_backward(grad: np.ndarray, grid_shape: Tuple[int, int], r: int) -> np.ndarray:
    h, w = grid_shape
    b, _, c = grad.shape
    return tc.block_mean_backward(grad.reshape(b, h // r, w // r, c), r)


def score_map(merged: np.ndarray) -> np.ndarray:
    """Mean activation over channels: S[j] = (1/c) Σ_c X̂[j, c]."""
    return tc.mean(merged, axis=-1)


def select_patches(merged: np.ndarray, scores: np.ndarray, k: int, stage: int = 0, r: int = 2) -> SelectedSet:
    """Top-k by score, then gather, independently per sample."""
    b, l_hat, _ = merged.shape
    if k > l_hat or k < 1:
        raise SelectionError(f"stage {stage}: k={k} exceeds {l_hat} merged patches")
    indices = np.stack([tc.topk_indices(scores[n], k) for n in range(b)])
    patches = np.stack([tc.gather_rows(merged[n], indices[n]) for n in range(b)])
    return SelectedSet(stage=stage, merge_factor=r, merged=merged, scores=scores, indices=indices, patches=patches)


def select_patches_backward(grad: np.ndarray, selected: SelectedSet) -> np.ndarray:
    """Straight-through: scatter patch gradients to their merged rows."""
    l_hat = selected.merged_count
    return np.stack([
        tc.gather_rows_backward(grad[n], selected.indices[n], l_hat) for n in range(grad.shape[0])
    ])


class PatchSelector:
    """Runs merge, score and select for the configured stages."""

    def __init__(self, config: ModelConfig):
        self.config = config

    def select(self, stage_output: StageOutput, stage: int) -> SelectedSet:
        r = self.config.merge_factor
        merged = merge_neighbors(stage_output.features, r)
        selected = select_patches(merged, score_map(merged), self.config.k_schedule[stage - 1], stage, r)
        selected.grid_shape = stage_output.features.shape[1:3]
        return selected

    def backward(self, grad_patches: np.ndarray, selected: SelectedSet) -> np.ndarray:
        """Gradient of the patches w.r.t. the stage's feature grid."""
        grad_merged = select_patches_backward(grad_patches, selected)
        return merge_neighbors_backward(grad_merged, selected.grid_shape, selected.merge_factor)
