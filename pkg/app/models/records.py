"""Array-valued records passed between the model blocks.

These hold numpy arrays, so they are dataclasses rather than pydantic models.
Every tensor carries a leading batch axis ``B``.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np


@dataclass
class StageOutput:
    """Feature grid X_i ``(B, h_i, w_i, c_i)`` and its detached CLS token ``(B, c_i)``."""
    features: np.ndarray
    cls: np.ndarray

    @property
    def stage_shape(self) -> Tuple[int, int, int]:
        return self.features.shape[1:]


@dataclass
class SelectedSet:
    """Result of patch selection on one stage."""
    stage: int
    merge_factor: int
    merged: np.ndarray      # X̂_i (B, l̂_i, c_i)
    scores: np.ndarray      # S_i (B, l̂_i)
    indices: np.ndarray     # I_i (B, k_i), descending score order
    patches: np.ndarray     # P_i (B, k_i, c_i)
    grid_shape: Tuple[int, int] = (0, 0)

    @property
    def merged_count(self) -> int:
        return self.merged.shape[1]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass
class McaState:
    """Intermediate tensors of one MSCA block, keyed by stage."""
    stages: List[int]
    inputs: Dict[int, np.ndarray] = field(default_factory=dict)
    descriptors: Dict[int, np.ndarray] = field(default_factory=dict)
    joint_descriptor: Optional[np.ndarray] = None
    channel_scores: Optional[np.ndarray] = None
    stage_scores: Dict[int, np.ndarray] = field(default_factory=dict)
    recalibrated: Dict[int, np.ndarray] = field(default_factory=dict)
    queries: Dict[int, np.ndarray] = field(default_factory=dict)
    keys: Dict[int, np.ndarray] = field(default_factory=dict)
    values: Dict[int, np.ndarray] = field(default_factory=dict)
    attention: Dict[int, np.ndarray] = field(default_factory=dict)  # (B, heads, k̃_i, keys)
    outputs: Dict[int, np.ndarray] = field(default_factory=dict)
    cross_stage: bool = True


@dataclass
class PredictionSet:
    """Per-head logits and softmax probabilities, each ``(B, n)``.

    Head names are ``stage1``..``stage4`` and ``concat``; a model without
    patch selection has the single head ``backbone``.
    """
    logits: Dict[str, np.ndarray]
    probs: Dict[str, np.ndarray]

    @property
    def heads(self) -> List[str]:
        return list(self.logits)


@dataclass
class SmoothedLabel:
    """Label vector from the smoothing rule; sums to α + (n−1)(1−α)/n."""
    vector: np.ndarray
    alpha: float
    target: int


@dataclass
class SyntheticSample:
    image: np.ndarray                      # (H, W, 3) float32
    label: int
    bbox: Tuple[int, int, int, int]        # x, y, w, h in pixels


@dataclass
class AttentionDump:
    """Head-averaged (or single-head) weights of one SCA query over all keys."""
    block: int
    sample: int
    head: int                              # -1 for the mean over heads
    records: np.ndarray                    # structured, ATTENTION_RECORD_DTYPE


@dataclass
class SelectionDump:
    """Per-stage selection indices and scores for one sample."""
    sample: int
    stages: List[int]
    merge_factor: int
    indices: Dict[int, np.ndarray]
    scores: Dict[int, np.ndarray]
