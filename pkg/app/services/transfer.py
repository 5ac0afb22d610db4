"""Class token transfer and CLS attachment.

The global token CLS_g (the stage-4 CLS) is projected to each earlier
stage's width and appended as the last row of that stage's selected patches.
Four pathways are supported for ablation:

- ``global_pool``: no CLS rows at all; heads read pooled patch means.
- ``simple_attach``: stage i re-attaches its own detached CLS_i.
- ``ctt_1mlp``: a single bias-free projection c₄ -> c_i.
- ``ctt_2mlp``: W¹ · ReLU(BN(W⁰ · CLS_g)), W⁰: 2c_i×c₄, W¹: c_i×2c_i.

Stage 4 always uses its CLS unchanged.
"""

import logging
from typing import List, Tuple, Union

import numpy as np

from app.exceptions import ConfigError, DimensionError
from app.models.config import NUM_STAGES, CttMode, ModelConfig
from app.models.records import StageOutput
from app.services import tensor_core as tc
from app.services.params import ForwardContext, ParamInitializer, ParamStore, accumulate

logger = logging.getLogger(__name__)


def attach_mode(value: Union[str, CttMode]) -> CttMode:
    """Parse a CLS pathway name."""
    try:
        return CttMode(value)
    except ValueError:
        raise ConfigError(f"Unknown CTT mode {value!r}; expected one of {[m.value for m in CttMode]}")


def attach_cls(patches: np.ndarray, cls: np.ndarray) -> np.ndarray:
    """``(B, k, c)`` + ``(B, c)`` -> ``(B, k+1, c)`` with CLS as the last row."""
    if patches.shape[-1] != cls.shape[-1] or patches.shape[0] != cls.shape[0]:
        raise DimensionError(f"attach_cls: patches {patches.shape} vs cls {cls.shape}")
    return tc.concat([patches, cls[:, None, :]], axis=1)


def detach_cls(tokens: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of ``attach_cls``."""
    return np.ascontiguousarray(tokens[:, :-1]), np.ascontiguousarray(tokens[:, -1])


class ClassTokenTransfer:

    def __init__(self, config: ModelConfig):
        self.config = config
        self.mode = attach_mode(config.ctt_mode)

    def projected_stages(self) -> List[int]:
        if self.mode not in (CttMode.CTT_1MLP, CttMode.CTT_2MLP):
            return []
        return [s for s in self.config.msps_stages if s < NUM_STAGES]

    def init_params(self, init: ParamInitializer) -> None:
        c4 = self.config.channels(NUM_STAGES)
        for stage in self.projected_stages():
            c = self.config.channels(stage)
            p = f"transfer.stage{stage}"
            if self.mode == CttMode.CTT_1MLP:
                init.weight(f"{p}.proj.weight", (c, c4))
            else:
                init.weight(f"{p}.fc0.weight", (2 * c, c4))
                init.batch_norm(f"{p}.bn", 2 * c)
                init.weight(f"{p}.fc1.weight", (c, 2 * c))

    def transfer_cls(
        self, params: ParamStore, ctx: ForwardContext, cls_g: np.ndarray, stage: int
    ) -> Tuple[np.ndarray, tuple]:
        """Project CLS_g ``(B, c₄)`` to stage ``stage``'s width ``(B, c_i)``."""
        if stage == NUM_STAGES:
            return cls_g, ()
        if stage not in range(1, NUM_STAGES):
            raise ConfigError(f"transfer_cls: stage must be in 1..3, got {stage}")
        p = f"transfer.stage{stage}"
        if self.mode == CttMode.CTT_1MLP:
            w = params[f"{p}.proj.weight"]
            return tc.matmul(cls_g, w.T), (cls_g,)
        w0, w1 = params[f"{p}.fc0.weight"], params[f"{p}.fc1.weight"]
        h = tc.matmul(cls_g, w0.T)
        running_mean, running_var = ctx.running_stats(f"{p}.bn")
        n, bn_cache, stats = tc.batch_norm(
            h, params[f"{p}.bn.weight"], params[f"{p}.bn.bias"], running_mean, running_var, ctx.training
        )
        ctx.record_stats(f"{p}.bn", stats)
        a = tc.relu(n)
        return tc.matmul(a, w1.T), (cls_g, h, bn_cache, n, a)

    def transfer_backward(
        self, params: ParamStore, grad: np.ndarray, stage: int, cache: tuple, grads: ParamStore
    ) -> np.ndarray:
        """Gradient w.r.t. CLS_g."""
        if stage == NUM_STAGES:
            return grad
        p = f"transfer.stage{stage}"
        if self.mode == CttMode.CTT_1MLP:
            (cls_g,) = cache
            w = params[f"{p}.proj.weight"]
            accumulate(grads, f"{p}.proj.weight", grad.T @ cls_g)
            return grad @ w
        cls_g, h, bn_cache, n, a = cache
        w0, w1 = params[f"{p}.fc0.weight"], params[f"{p}.fc1.weight"]
        accumulate(grads, f"{p}.fc1.weight", grad.T @ a)
        ga = grad @ w1
        gn = tc.relu_backward(ga, n)
        gh, gg, gb = tc.batch_norm_backward(gn, bn_cache)
        accumulate(grads, f"{p}.bn.weight", gg)
        accumulate(grads, f"{p}.bn.bias", gb)
        accumulate(grads, f"{p}.fc0.weight", gh.T @ cls_g)
        return gh @ w0

    def stage_cls(
        self, params: ParamStore, ctx: ForwardContext, stage_outputs: List[StageOutput], stage: int
    ) -> Tuple[np.ndarray, tuple]:
        """The CLS row stage ``stage`` consumes under the configured pathway."""
        if self.mode == CttMode.GLOBAL_POOL:
            raise ConfigError("global_pool mode attaches no CLS token")
        if self.mode == CttMode.SIMPLE_ATTACH:
            return stage_outputs[stage - 1].cls, ()
        return self.transfer_cls(params, ctx, stage_outputs[NUM_STAGES - 1].cls, stage)
