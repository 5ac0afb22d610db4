"""SGD with momentum and the cosine learning-rate schedule."""

import math
from typing import Dict

import numpy as np

from app.models.config import TrainingConfig
from app.services.params import ParamStore


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0, min_lr: float = 0.0) -> float:
    """Linear warmup, then cosine decay from ``base_lr`` to ``min_lr`` at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * (step + 1) / (warmup_steps + 1)
    span = max(total_steps - warmup_steps, 1)
    ratio = min(max((step - warmup_steps) / span, 0.0), 1.0)
    coeff = 0.5 * (1.0 + math.cos(math.pi * ratio))
    return min_lr + coeff * (base_lr - min_lr)


class SGD:
    """Heavy-ball SGD: v ← μ·v + (g + λ·p), p ← p − lr·v.

    The momentum buffer is created from the first gradient, so the first
    step is plain SGD.
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, training: TrainingConfig) -> "SGD":
        return cls(momentum=training.momentum, weight_decay=training.weight_decay)

    def step(self, params: ParamStore, grads: ParamStore, lr: float) -> None:
        """Update ``params`` in place; parameters without a gradient are left alone."""
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] = (p - lr * v).astype(p.dtype, copy=False)
