"""Simplified four-stage multi-scale transformer.

Geometry follows the hierarchical backbone the selection stack attaches to:
4×4 patch embedding, then four stages at h₀/4, h₀/8, h₀/16 and h₀/32 with
channel doubling. Inside a stage, plain pre-norm encoder blocks run over the
grid tokens plus a CLS token (row 0). Between stages the grid is 2×2
average-pooled and linearly widened; CLS is re-projected to the new width.

Parameter names follow ``stage{i}.block{j}.{tensor}``.
"""

import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.exceptions import ConfigError, DimensionError
from app.models.config import NUM_STAGES, PATCH_SIZE, ModelConfig
from app.models.records import StageOutput
from app.services import tensor_core as tc
from app.services.attention import attention_backward, attention_forward
from app.services.params import ParamInitializer, ParamStore, accumulate

logger = logging.getLogger(__name__)

StageGrads = Tuple[Optional[np.ndarray], Optional[np.ndarray]]


class Backbone:
    """Patch embedding plus four encoder stages."""

    def __init__(self, config: ModelConfig):
        self.config = config

    # ------------------------------------------------------------------
    # Parameters
    # ------------------------------------------------------------------

    def init_params(self, init: ParamInitializer) -> None:
        cfg = self.config
        c1 = cfg.channels(1)
        side = cfg.resolution(1)
        init.weight("patch_embed.weight", (PATCH_SIZE * PATCH_SIZE * cfg.in_channels, c1))
        init.zeros("patch_embed.bias", (c1,))
        init.weight("patch_embed.pos", (side * side, c1))
        init.weight("cls_token", (c1,))
        for stage in range(1, NUM_STAGES + 1):
            c = cfg.channels(stage)
            hidden = cfg.mlp_ratio * c
            for j in range(cfg.stage_depths[stage - 1]):
                p = f"stage{stage}.block{j}"
                init.norm(f"{p}.norm1", c)
                init.weight(f"{p}.attn.qkv.weight", (c, 3 * c))
                init.zeros(f"{p}.attn.qkv.bias", (3 * c,))
                init.weight(f"{p}.attn.proj.weight", (c, c))
                init.zeros(f"{p}.attn.proj.bias", (c,))
                init.norm(f"{p}.norm2", c)
                init.weight(f"{p}.mlp.fc1.weight", (c, hidden))
                init.zeros(f"{p}.mlp.fc1.bias", (hidden,))
                init.weight(f"{p}.mlp.fc2.weight", (hidden, c))
                init.zeros(f"{p}.mlp.fc2.bias", (c,))
            if stage < NUM_STAGES:
                init.weight(f"stage{stage}.downsample.weight", (c, 2 * c))
                init.zeros(f"stage{stage}.downsample.bias", (2 * c,))
                init.weight(f"stage{stage}.cls_proj.weight", (c, 2 * c))
                init.zeros(f"stage{stage}.cls_proj.bias", (2 * c,))

    # ------------------------------------------------------------------
    # Patch embedding
    # ------------------------------------------------------------------

    def patch_embed(self, params: ParamStore, images: np.ndarray) -> Tuple[np.ndarray, tuple]:
        """``(B, h₀, w₀, c₀)`` images -> ``(B, h₀/4, w₀/4, c₁)`` token grid.

        Each token is a learned linear map of one 4×4×c₀ pixel block plus a
        learned positional term.
        """
        cfg = self.config
        b, h, w, c0 = images.shape
        if h % PATCH_SIZE or w % PATCH_SIZE:
            raise ConfigError(f"image {h}x{w} not divisible by patch size {PATCH_SIZE}")
        if (h, w, c0) != (cfg.input_size, cfg.input_size, cfg.in_channels):
            raise DimensionError(
                f"patch_embed: image {(h, w, c0)} does not match config "
                f"{(cfg.input_size, cfg.input_size, cfg.in_channels)}"
            )
        tc.check_finite(images, "patch_embed input")
        gh, gw = h // PATCH_SIZE, w // PATCH_SIZE
        patches = (
            images.reshape(b, gh, PATCH_SIZE, gw, PATCH_SIZE, c0)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, gh * gw, PATCH_SIZE * PATCH_SIZE * c0)
        )
        tokens = tc.linear(patches, params["patch_embed.weight"], params["patch_embed.bias"])
        tokens = tc.add(tokens, params["patch_embed.pos"])
        return tokens.reshape(b, gh, gw, -1), (patches, images.shape)

    def patch_embed_backward(
        self, params: ParamStore, grad: np.ndarray, cache: tuple, grads: ParamStore
    ) -> np.ndarray:
        patches, image_shape = cache
        b, gh, gw, c1 = grad.shape
        g = grad.reshape(b, gh * gw, c1)
        accumulate(grads, "patch_embed.pos", g.sum(axis=0))
        grad_patches, grad_w, grad_b = tc.linear_backward(g, patches, params["patch_embed.weight"], True)
        accumulate(grads, "patch_embed.weight", grad_w)
        accumulate(grads, "patch_embed.bias", grad_b)
        _, h, w, c0 = image_shape
        return (
            grad_patches.reshape(b, gh, gw, PATCH_SIZE, PATCH_SIZE, c0)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(image_shape)
        )

    # ------------------------------------------------------------------
    # Encoder block
    # ------------------------------------------------------------------

    def encoder_block(
        self, params: ParamStore, prefix: str, x: np.ndarray, heads: int, keep_cache: bool
    ) -> Tuple[np.ndarray, Optional[dict]]:
        c = x.shape[-1]
        h1, ln1 = tc.layer_norm(x, params[f"{prefix}.norm1.weight"], params[f"{prefix}.norm1.bias"])
        qkv = tc.linear(h1, params[f"{prefix}.attn.qkv.weight"], params[f"{prefix}.attn.qkv.bias"])
        q, k, v = tc.split(qkv, [c, c, c], axis=-1)
        a, att = attention_forward(q, k, v, heads, 1.0 / math.sqrt(c // heads), keep_cache)
        x1 = tc.add(x, tc.linear(a, params[f"{prefix}.attn.proj.weight"], params[f"{prefix}.attn.proj.bias"]))
        h2, ln2 = tc.layer_norm(x1, params[f"{prefix}.norm2.weight"], params[f"{prefix}.norm2.bias"])
        f1 = tc.linear(h2, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"])
        r = tc.relu(f1)
        x2 = tc.add(x1, tc.linear(r, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"]))
        if not keep_cache:
            return x2, None
        return x2, {"h1": h1, "ln1": ln1, "att": att, "a": a, "h2": h2, "ln2": ln2, "f1": f1, "r": r}

    def encoder_block_backward(
        self, params: ParamStore, prefix: str, grad: np.ndarray, cache: dict, grads: ParamStore
    ) -> np.ndarray:
        gr, gw, gb = tc.linear_backward(grad, cache["r"], params[f"{prefix}.mlp.fc2.weight"], True)
        accumulate(grads, f"{prefix}.mlp.fc2.weight", gw)
        accumulate(grads, f"{prefix}.mlp.fc2.bias", gb)
        gf1 = tc.relu_backward(gr, cache["f1"])
        gh2, gw, gb = tc.linear_backward(gf1, cache["h2"], params[f"{prefix}.mlp.fc1.weight"], True)
        accumulate(grads, f"{prefix}.mlp.fc1.weight", gw)
        accumulate(grads, f"{prefix}.mlp.fc1.bias", gb)
        gx1, gg, gbeta = tc.layer_norm_backward(gh2, cache["ln2"])
        accumulate(grads, f"{prefix}.norm2.weight", gg)
        accumulate(grads, f"{prefix}.norm2.bias", gbeta)
        gx1 = gx1 + grad

        ga, gw, gb = tc.linear_backward(gx1, cache["a"], params[f"{prefix}.attn.proj.weight"], True)
        accumulate(grads, f"{prefix}.attn.proj.weight", gw)
        accumulate(grads, f"{prefix}.attn.proj.bias", gb)
        gq, gk, gv = attention_backward(ga, cache["att"])
        gqkv = tc.concat([gq, gk, gv], axis=-1)
        gh1, gw, gb = tc.linear_backward(gqkv, cache["h1"], params[f"{prefix}.attn.qkv.weight"], True)
        accumulate(grads, f"{prefix}.attn.qkv.weight", gw)
        accumulate(grads, f"{prefix}.attn.qkv.bias", gb)
        gx, gg, gbeta = tc.layer_norm_backward(gh1, cache["ln1"])
        accumulate(grads, f"{prefix}.norm1.weight", gg)
        accumulate(grads, f"{prefix}.norm1.bias", gbeta)
        return gx + gx1

    # ------------------------------------------------------------------
    # Stages
    # ------------------------------------------------------------------

    def run_stage(
        self, params: ParamStore, stage_input: StageOutput, stage: int, keep_cache: bool = True
    ) -> Tuple[StageOutput, Optional[StageOutput], Optional[dict]]:
        """Run stage ``stage`` on its input grid and CLS token.

        Returns the stage's features X_i with CLS_i, the next stage's input
        (``None`` after stage 4) and the backward cache.
        """
        cfg = self.config
        side, c = cfg.resolution(stage), cfg.channels(stage)
        b = stage_input.features.shape[0]
        if stage_input.features.shape[1:] != (side, side, c) or stage_input.cls.shape != (b, c):
            raise DimensionError(
                f"stage {stage}: input {stage_input.features.shape}/{stage_input.cls.shape} "
                f"does not match ({side}, {side}, {c})"
            )
        tokens = tc.concat([stage_input.cls[:, None, :], stage_input.features.reshape(b, side * side, c)], axis=1)
        block_caches = []
        for j in range(cfg.stage_depths[stage - 1]):
            tokens, bc = self.encoder_block(
                params, f"stage{stage}.block{j}", tokens, cfg.stage_heads[stage - 1], keep_cache
            )
            block_caches.append(bc)
        output = StageOutput(features=np.ascontiguousarray(tokens[:, 1:].reshape(b, side, side, c)),
                             cls=np.ascontiguousarray(tokens[:, 0]))
        if stage == NUM_STAGES:
            return output, None, {"blocks": block_caches, "output": output} if keep_cache else None

        pooled = tc.block_mean(output.features, 2)
        nxt = StageOutput(
            features=tc.linear(pooled, params[f"stage{stage}.downsample.weight"], params[f"stage{stage}.downsample.bias"]),
            cls=tc.linear(output.cls, params[f"stage{stage}.cls_proj.weight"], params[f"stage{stage}.cls_proj.bias"]),
        )
        cache = {"blocks": block_caches, "output": output, "pooled": pooled} if keep_cache else None
        return output, nxt, cache

    def run_stage_backward(
        self,
        params: ParamStore,
        stage: int,
        grad_output: StageGrads,
        grad_next: Optional[StageOutput],
        cache: dict,
        grads: ParamStore,
    ) -> StageOutput:
        """Back-propagate through one stage; returns gradients w.r.t. its input."""
        output: StageOutput = cache["output"]
        b, side, _, c = output.features.shape
        g_feat = np.zeros_like(output.features) if grad_output[0] is None else grad_output[0].copy()
        g_cls = np.zeros_like(output.cls) if grad_output[1] is None else grad_output[1].copy()
        if grad_next is not None:
            gp, gw, gb = tc.linear_backward(
                grad_next.features, cache["pooled"], params[f"stage{stage}.downsample.weight"], True
            )
            accumulate(grads, f"stage{stage}.downsample.weight", gw)
            accumulate(grads, f"stage{stage}.downsample.bias", gb)
            g_feat += tc.block_mean_backward(gp, 2)
            gc, gw, gb = tc.linear_backward(grad_next.cls, output.cls, params[f"stage{stage}.cls_proj.weight"], True)
            accumulate(grads, f"stage{stage}.cls_proj.weight", gw)
            accumulate(grads, f"stage{stage}.cls_proj.bias", gb)
            g_cls += gc

        g_tokens = tc.concat([g_cls[:, None, :], g_feat.reshape(b, side * side, c)], axis=1)
        for j in reversed(range(self.config.stage_depths[stage - 1])):
            g_tokens = self.encoder_block_backward(
                params, f"stage{stage}.block{j}", g_tokens, cache["blocks"][j], grads
            )
        return StageOutput(features=g_tokens[:, 1:].reshape(b, side, side, c), cls=g_tokens[:, 0])

    # ------------------------------------------------------------------
    # Full pass
    # ------------------------------------------------------------------

    def forward(
        self, params: ParamStore, images: np.ndarray, keep_cache: bool = True
    ) -> Tuple[List[StageOutput], Optional[dict]]:
        """All four StageOutputs; the stage-4 CLS is the global token CLS_g."""
        grid, embed_cache = self.patch_embed(params, images)
        b = grid.shape[0]
        stage_input = StageOutput(features=grid, cls=np.broadcast_to(params["cls_token"], (b, grid.shape[-1])).copy())
        outputs, stage_caches = [], []
        for stage in range(1, NUM_STAGES + 1):
            output, stage_input, cache = self.run_stage(params, stage_input, stage, keep_cache)
            outputs.append(output)
            stage_caches.append(cache)
        return outputs, ({"embed": embed_cache, "stages": stage_caches} if keep_cache else None)

    def backward(
        self, params: ParamStore, stage_grads: Dict[int, StageGrads], cache: dict, grads: ParamStore
    ) -> np.ndarray:
        """Back-propagate feature/CLS gradients of every stage; returns d(images)."""
        grad_next: Optional[StageOutput] = None
        for stage in range(NUM_STAGES, 0, -1):
            grad_next = self.run_stage_backward(
                params, stage, stage_grads.get(stage, (None, None)), grad_next, cache["stages"][stage - 1], grads
            )
        accumulate(grads, "cls_token", grad_next.cls.sum(axis=0))
        return self.patch_embed_backward(params, grad_next.features, cache["embed"], grads)


def stage_geometry(config: ModelConfig) -> List[Tuple[int, int, int]]:
    """(h_i, w_i, c_i) for every stage."""
    return [(config.resolution(s), config.resolution(s), config.channels(s)) for s in range(1, NUM_STAGES + 1)]
