"""The assembled multi-scale classifier.

Backbone -> per-stage patch selection -> CLS attachment -> MSCA blocks ->
heads. With no selection stage configured the model collapses to the bare
backbone with a linear classifier on CLS_g.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.models.config import NUM_STAGES, CttMode, ModelConfig, with_overrides
from app.models.records import McaState, PredictionSet, SelectedSet
from app.services import tensor_core as tc
from app.services.backbone import Backbone
from app.services.crossattn import MultiScaleCrossAttention
from app.services.heads import ClassifierHeads, total_loss, total_loss_backward
from app.services.params import ForwardContext, ParamInitializer, ParamStore, count_parameters
from app.services.selection import PatchSelector
from app.services.transfer import ClassTokenTransfer, attach_cls, detach_cls

logger = logging.getLogger(__name__)


@dataclass
class ModelOutput:
    predictions: PredictionSet
    selections: Dict[int, SelectedSet] = field(default_factory=dict)
    states: List[McaState] = field(default_factory=list)
    cache: Optional[dict] = None


class MultiScaleModel:
    """Owns the blocks; parameters and buffers are passed in explicitly."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.backbone = Backbone(config)
        self.selector = PatchSelector(config)
        self.transfer = ClassTokenTransfer(config)
        self.msca = MultiScaleCrossAttention(config)
        self.heads = ClassifierHeads(config)
        self.stages = list(config.msps_stages)

    def init_params(self, dtype=np.float32, std: float = 0.02) -> Tuple[ParamStore, ParamStore]:
        """Fresh parameters and BN buffers drawn from the config seed."""
        init = ParamInitializer(tc.make_rng(self.config.seed), dtype, std)
        self.backbone.init_params(init)
        if self.stages:
            self.transfer.init_params(init)
            self.msca.init_params(init)
        self.heads.init_params(init)
        logger.debug(f"Initialized {len(init.params)} parameter tensors ({count_parameters(init.params)} values)")
        return init.params, init.buffers

    def forward(self, params: ParamStore, ctx: ForwardContext, images: np.ndarray) -> ModelOutput:
        dtype = params["cls_token"].dtype
        images = tc.as_tensor(images, dtype)
        stage_outputs, backbone_cache = self.backbone.forward(params, images, ctx.keep_cache)

        if not self.stages:
            predictions, head_cache = self.heads.backbone_prediction(params, stage_outputs[NUM_STAGES - 1].cls)
            cache = {"backbone": backbone_cache, "heads": head_cache} if ctx.keep_cache else None
            return ModelOutput(predictions=predictions, cache=cache)

        selections: Dict[int, SelectedSet] = {}
        tokens: Dict[int, np.ndarray] = {}
        transfer_caches = {}
        for s in self.stages:
            selections[s] = self.selector.select(stage_outputs[s - 1], s)
            if self.config.uses_cls:
                cls_row, transfer_caches[s] = self.transfer.stage_cls(params, ctx, stage_outputs, s)
                tokens[s] = attach_cls(selections[s].patches, cls_row)
            else:
                tokens[s] = selections[s].patches

        outputs, msca_caches = self.msca.forward(params, ctx, tokens)
        predictions, head_cache = self.heads.stage_predictions(params, outputs)
        states = [self.msca.state(c) for c in msca_caches] if ctx.retain_maps else []
        cache = None
        if ctx.keep_cache:
            cache = {
                "backbone": backbone_cache, "transfer": transfer_caches,
                "msca": msca_caches, "heads": head_cache, "selections": selections,
            }
        return ModelOutput(predictions=predictions, selections=selections, states=states, cache=cache)

    def backward(
        self, params: ParamStore, grad_logits: Dict[str, np.ndarray], cache: dict
    ) -> Tuple[ParamStore, np.ndarray]:
        """Parameter gradients plus the gradient w.r.t. the input images."""
        grads: ParamStore = {}
        if not self.stages:
            g_cls = self.heads.backbone_prediction_backward(params, grad_logits, cache["heads"], grads)
            grad_images = self.backbone.backward(params, {NUM_STAGES: (None, g_cls)}, cache["backbone"], grads)
            return grads, grad_images

        g_outputs = self.heads.stage_predictions_backward(params, grad_logits, cache["heads"], grads)
        g_tokens = self.msca.backward(params, g_outputs, cache["msca"], grads)

        stage_grads = {}
        g_cls_global = None
        for s in self.stages:
            selected = cache["selections"][s]
            if self.config.uses_cls:
                g_patches, g_cls_row = detach_cls(g_tokens[s])
            else:
                g_patches, g_cls_row = g_tokens[s], None
            g_features = self.selector.backward(g_patches, selected)
            g_cls_stage = None
            if g_cls_row is not None:
                if self.transfer.mode == CttMode.SIMPLE_ATTACH:
                    g_cls_stage = g_cls_row
                else:
                    g = self.transfer.transfer_backward(params, g_cls_row, s, cache["transfer"][s], grads)
                    g_cls_global = g if g_cls_global is None else g_cls_global + g
            stage_grads[s] = (g_features, g_cls_stage)

        if g_cls_global is not None:
            g_feat4, g_cls4 = stage_grads.get(NUM_STAGES, (None, None))
            stage_grads[NUM_STAGES] = (g_feat4, g_cls_global if g_cls4 is None else g_cls4 + g_cls_global)
        grad_images = self.backbone.backward(params, stage_grads, cache["backbone"], grads)
        return grads, grad_images

    def loss_and_grads(
        self, params: ParamStore, ctx: ForwardContext, images: np.ndarray, targets: np.ndarray
    ) -> Tuple[float, ParamStore, PredictionSet]:
        """One training pass: forward, summed loss, backward."""
        output = self.forward(params, ctx, images)
        loss = total_loss(output.predictions, targets, self.config.alpha_schedule)
        grad_logits = total_loss_backward(output.predictions, targets, self.config.alpha_schedule)
        grads, _ = self.backward(params, grad_logits, output.cache)
        return loss, grads, output.predictions

    def predict(
        self, params: ParamStore, buffers: ParamStore, images: np.ndarray, batch_size: int = 16
    ) -> PredictionSet:
        """Eval-mode predictions over ``images`` in fixed-size batches."""
        logits: Dict[str, List[np.ndarray]] = {}
        probs: Dict[str, List[np.ndarray]] = {}
        for start in range(0, images.shape[0], batch_size):
            ctx = ForwardContext(buffers=buffers, training=False, keep_cache=False)
            out = self.forward(params, ctx, images[start:start + batch_size]).predictions
            for name in out.heads:
                logits.setdefault(name, []).append(out.logits[name])
                probs.setdefault(name, []).append(out.probs[name])
        return PredictionSet(
            logits={k: np.concatenate(v) for k, v in logits.items()},
            probs={k: np.concatenate(v) for k, v in probs.items()},
        )


def parameter_count(config: ModelConfig) -> int:
    """Trainable values in a model built from ``config``."""
    params, _ = MultiScaleModel(config).init_params()
    return count_parameters(params)


def bare_backbone_parameter_count(config: ModelConfig) -> int:
    """Backbone plus a single linear classifier on CLS_g, counted independently."""
    bare = with_overrides(config, msps_stages=())
    init = ParamInitializer(tc.make_rng(bare.seed), np.float32)
    Backbone(bare).init_params(init)
    head = bare.channels(NUM_STAGES) * bare.num_classes + bare.num_classes
    return count_parameters(init.params) + head
