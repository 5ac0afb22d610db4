"""Configs, run records and result models."""

from app.models.config import ModelConfig, TrainingConfig, CttMode
from app.models.results import GradThresholds, GradReport, RunMetrics, AblationRow

__all__ = [
    "ModelConfig",
    "TrainingConfig",
    "CttMode",
    "GradThresholds",
    "GradReport",
    "RunMetrics",
    "AblationRow",
]
