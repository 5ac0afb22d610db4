"""Report models written by the harness."""

from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class GradThresholds(BaseModel):
    """Tolerances for an analytic-vs-numeric gradient comparison."""
    eps: float = Field(1e-5, gt=0.0)
    rel_tol: float = Field(1e-4, gt=0.0)
    max_coords: int = Field(64, ge=1)
    # Disagreement at or below this fraction of the largest sampled gradient is not scored.
    negligible: float = Field(1e-7, ge=0.0)


class GradReport(BaseModel):
    """Outcome of one gradient check."""
    block: str
    seed: int
    parameters: List[str]
    coords_checked: int
    negligible_coords: int = 0
    max_relative_error: float
    max_absolute_error: float
    threshold: float
    passed: bool
    unselected_grad_zero: Optional[bool] = None


class RunMetrics(BaseModel):
    """One metrics record; ``wall_time`` is kept out of the serialized stream."""
    step: int
    split: str = "train"
    losses: List[float] = Field(default_factory=list)
    learning_rate: Optional[float] = None
    head_accuracy: Dict[str, float] = Field(default_factory=dict)
    aggregate_accuracy: float
    bucket_accuracy: Dict[str, Optional[float]] = Field(default_factory=dict)
    bucket_counts: Dict[str, int] = Field(default_factory=dict)
    seed: int
    config_hash: str
    wall_time: Optional[float] = Field(None, exclude=True)


class AblationRow(BaseModel):
    """One variant in an ablation table."""
    switch: str
    variant: str
    overrides: Dict[str, object] = Field(default_factory=dict)
    parameter_count: int
    bare_backbone_parameter_count: int
    final_loss: Optional[float] = None
    aggregate_accuracy: Optional[float] = None
    head_accuracy: Dict[str, float] = Field(default_factory=dict)
    bucket_accuracy: Dict[str, Optional[float]] = Field(default_factory=dict)
