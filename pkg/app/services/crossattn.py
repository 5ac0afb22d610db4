"""Multi-scale cross-attention over the selected patch sets.

One MSCA block is::

    Ỹ   = CCA(P̃)                      channel recalibration across stages
    Z_i = Ỹ_i + SCA(Ỹ)_i              queries of stage i over keys of all stages
    Õ_i = Z_i + FFN_i(LN_i(Z_i))

CCA pools every stage to a channel descriptor, concatenates them, and gates
each stage's channels with sigmoid(W¹ ReLU(BN(W⁰ D))) plus a residual.
SCA projects each stage to a shared width d, concatenates keys and values
over stages, attends with scale 1/√d per head and projects back to c_i.

Token sets are dicts keyed by stage number; only active stages appear.
"""

import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.exceptions import DimensionError, TensorIndexError
from app.models.config import ModelConfig
from app.models.records import AttentionDump, McaState, SelectedSet
from app.services import tensor_core as tc
from app.services.attention import attention_backward, attention_forward
from app.services.params import ForwardContext, ParamInitializer, ParamStore, accumulate

logger = logging.getLogger(__name__)

TokenSet = Dict[int, np.ndarray]

ATTENTION_RECORD_DTYPE = np.dtype([
    ("query_stage", "<u4"),
    ("query_row", "<u4"),
    ("key_stage", "<u4"),
    ("key_row", "<u4"),
    ("merged_grid_index", "<i4"),
    ("weight", "<f4"),
])


def recalibrate(tokens: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Ỹ = P̃ ⊗ C + P̃ with ``scores`` ``(B, c)`` broadcast over rows."""
    return tc.add(tc.mul(tokens, scores[:, None, :]), tokens)


class MultiScaleCrossAttention:

    def __init__(self, config: ModelConfig):
        self.config = config
        self.stages: List[int] = list(config.msps_stages)

    def init_params(self, init: ParamInitializer) -> None:
        cfg = self.config
        c, d = cfg.concat_width, cfg.attention_dim
        for j in range(cfg.num_msca_blocks):
            p = f"msca.block{j}"
            if cfg.cca_enabled:
                init.weight(f"{p}.cca.fc0.weight", (c // 2, c))
                init.batch_norm(f"{p}.cca.bn", c // 2)
                init.weight(f"{p}.cca.fc1.weight", (c, c // 2))
            for s in self.stages:
                ci = cfg.channels(s)
                for name in ("q", "k", "v"):
                    init.weight(f"{p}.sca.stage{s}.{name}.weight", (ci, d))
                init.weight(f"{p}.sca.stage{s}.out.weight", (d, ci))
                hidden = cfg.mlp_ratio * ci
                init.norm(f"{p}.ffn.stage{s}.norm", ci)
                init.weight(f"{p}.ffn.stage{s}.fc1.weight", (ci, hidden))
                init.zeros(f"{p}.ffn.stage{s}.fc1.bias", (hidden,))
                init.weight(f"{p}.ffn.stage{s}.fc2.weight", (hidden, ci))
                init.zeros(f"{p}.ffn.stage{s}.fc2.bias", (ci,))

    def _check_widths(self, tokens: TokenSet) -> None:
        if sorted(tokens) != self.stages:
            raise DimensionError(f"expected token sets for stages {self.stages}, got {sorted(tokens)}")
        for s, t in tokens.items():
            if t.ndim != 3 or t.shape[-1] != self.config.channels(s):
                raise DimensionError(f"stage {s}: tokens {t.shape} do not have width {self.config.channels(s)}")

    # ------------------------------------------------------------------
    # Channel cross-attention
    # ------------------------------------------------------------------

    def cca(
        self, params: ParamStore, ctx: ForwardContext, tokens: TokenSet, block: int = 0
    ) -> Tuple[TokenSet, Optional[dict]]:
        self._check_widths(tokens)
        if not self.config.cca_enabled:
            return dict(tokens), None
        p = f"msca.block{block}.cca"
        widths = [tokens[s].shape[-1] for s in self.stages]
        descriptors = {s: tc.mean(tokens[s], axis=1) for s in self.stages}
        joint = tc.concat([descriptors[s] for s in self.stages], axis=-1)
        w0, w1 = params[f"{p}.fc0.weight"], params[f"{p}.fc1.weight"]
        h = tc.matmul(joint, w0.T)
        running_mean, running_var = ctx.running_stats(f"{p}.bn")
        n, bn_cache, stats = tc.batch_norm(
            h, params[f"{p}.bn.weight"], params[f"{p}.bn.bias"], running_mean, running_var, ctx.training
        )
        ctx.record_stats(f"{p}.bn", stats)
        a = tc.relu(n)
        scores = tc.sigmoid(tc.matmul(a, w1.T))
        stage_scores = dict(zip(self.stages, tc.split(scores, widths, axis=-1)))
        out = {s: recalibrate(tokens[s], stage_scores[s]) for s in self.stages}
        cache = {
            "tokens": tokens, "descriptors": descriptors, "joint": joint, "h": h, "bn": bn_cache,
            "n": n, "a": a, "scores": scores, "stage_scores": stage_scores, "widths": widths,
        }
        return out, cache

    def cca_backward(
        self, params: ParamStore, grad: TokenSet, cache: Optional[dict], grads: ParamStore, block: int = 0
    ) -> TokenSet:
        if cache is None:
            return dict(grad)
        p = f"msca.block{block}.cca"
        tokens, stage_scores = cache["tokens"], cache["stage_scores"]
        grad_tokens = {}
        grad_score_parts = []
        for s in self.stages:
            c_s = stage_scores[s][:, None, :]
            grad_tokens[s] = grad[s] * (1.0 + c_s)
            grad_score_parts.append((grad[s] * tokens[s]).sum(axis=1))
        g_scores = tc.concat(grad_score_parts, axis=-1)
        g_pre = tc.sigmoid_backward(g_scores, cache["scores"])
        w0, w1 = params[f"{p}.fc0.weight"], params[f"{p}.fc1.weight"]
        accumulate(grads, f"{p}.fc1.weight", g_pre.T @ cache["a"])
        g_n = tc.relu_backward(g_pre @ w1, cache["n"])
        g_h, g_gamma, g_beta = tc.batch_norm_backward(g_n, cache["bn"])
        accumulate(grads, f"{p}.bn.weight", g_gamma)
        accumulate(grads, f"{p}.bn.bias", g_beta)
        accumulate(grads, f"{p}.fc0.weight", g_h.T @ cache["joint"])
        g_joint = g_h @ w0
        for s, g_d in zip(self.stages, tc.split(g_joint, cache["widths"], axis=-1)):
            grad_tokens[s] = grad_tokens[s] + tc.mean_backward(g_d, tokens[s].shape, axis=1)
        return grad_tokens

    # ------------------------------------------------------------------
    # Spatial cross-attention
    # ------------------------------------------------------------------

    def sca(
        self, params: ParamStore, ctx: ForwardContext, tokens: TokenSet, block: int = 0
    ) -> Tuple[TokenSet, dict]:
        self._check_widths(tokens)
        cfg = self.config
        p = f"msca.block{block}.sca"
        q = {s: tc.matmul(tokens[s], params[f"{p}.stage{s}.q.weight"]) for s in self.stages}
        k = {s: tc.matmul(tokens[s], params[f"{p}.stage{s}.k.weight"]) for s in self.stages}
        v = {s: tc.matmul(tokens[s], params[f"{p}.stage{s}.v.weight"]) for s in self.stages}
        cross = cfg.sca_enabled
        if cross:
            k_all = tc.concat([k[s] for s in self.stages], axis=1)
            v_all = tc.concat([v[s] for s in self.stages], axis=1)
        scale = 1.0 / math.sqrt(cfg.attention_dim)
        keep = ctx.keep_cache or ctx.retain_maps
        attended, att_caches, out = {}, {}, {}
        for s in self.stages:
            keys, values = (k_all, v_all) if cross else (k[s], v[s])
            attended[s], att_caches[s] = attention_forward(q[s], keys, values, cfg.msca_heads, scale, keep)
            out[s] = tc.matmul(attended[s], params[f"{p}.stage{s}.out.weight"])
        cache = {"tokens": tokens, "q": q, "k": k, "v": v, "attended": attended, "att": att_caches, "cross": cross}
        return out, cache

    def sca_backward(self, params: ParamStore, grad: TokenSet, cache: dict, grads: ParamStore, block: int = 0) -> TokenSet:
        p = f"msca.block{block}.sca"
        tokens = cache["tokens"]
        rows = [tokens[s].shape[1] for s in self.stages]
        g_q, g_k, g_v = {}, {}, {}
        g_k_all = g_v_all = 0.0
        for s in self.stages:
            w_out = params[f"{p}.stage{s}.out.weight"]
            g_att, g_w = tc.matmul_backward(grad[s], cache["attended"][s], w_out)
            accumulate(grads, f"{p}.stage{s}.out.weight", g_w)
            g_q[s], gk, gv = attention_backward(g_att, cache["att"][s])
            if cache["cross"]:
                g_k_all = g_k_all + gk
                g_v_all = g_v_all + gv
            else:
                g_k[s], g_v[s] = gk, gv
        if cache["cross"]:
            g_k = dict(zip(self.stages, tc.split(g_k_all, rows, axis=1)))
            g_v = dict(zip(self.stages, tc.split(g_v_all, rows, axis=1)))

        grad_tokens = {}
        for s in self.stages:
            total = 0.0
            for name, g in (("q", g_q[s]), ("k", g_k[s]), ("v", g_v[s])):
                g_in, g_w = tc.matmul_backward(g, tokens[s], params[f"{p}.stage{s}.{name}.weight"])
                accumulate(grads, f"{p}.stage{s}.{name}.weight", g_w)
                total = total + g_in
            grad_tokens[s] = total
        return grad_tokens

    # ------------------------------------------------------------------
    # Feed-forward
    # ------------------------------------------------------------------

    def _ffn(self, params: ParamStore, prefix: str, z: np.ndarray) -> Tuple[np.ndarray, tuple]:
        h, ln = tc.layer_norm(z, params[f"{prefix}.norm.weight"], params[f"{prefix}.norm.bias"])
        f1 = tc.linear(h, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"])
        r = tc.relu(f1)
        f2 = tc.linear(r, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])
        return tc.add(z, f2), (h, ln, f1, r)

    def _ffn_backward(self, params: ParamStore, prefix: str, grad: np.ndarray, cache: tuple, grads: ParamStore) -> np.ndarray:
        h, ln, f1, r = cache
        g_r, g_w, g_b = tc.linear_backward(grad, r, params[f"{prefix}.fc2.weight"], True)
        accumulate(grads, f"{prefix}.fc2.weight", g_w)
        accumulate(grads, f"{prefix}.fc2.bias", g_b)
        g_h, g_w, g_b = tc.linear_backward(tc.relu_backward(g_r, f1), h, params[f"{prefix}.fc1.weight"], True)
        accumulate(grads, f"{prefix}.fc1.weight", g_w)
        accumulate(grads, f"{prefix}.fc1.bias", g_b)
        g_z, g_gamma, g_beta = tc.layer_norm_backward(g_h, ln)
        accumulate(grads, f"{prefix}.norm.weight", g_gamma)
        accumulate(grads, f"{prefix}.norm.bias", g_beta)
        return grad + g_z

    # ------------------------------------------------------------------
    # Block and stack
    # ------------------------------------------------------------------

    def msca_block(
        self, params: ParamStore, ctx: ForwardContext, tokens: TokenSet, block: int = 0
    ) -> Tuple[TokenSet, dict]:
        recalibrated, cca_cache = self.cca(params, ctx, tokens, block)
        attended, sca_cache = self.sca(params, ctx, recalibrated, block)
        out, ffn_caches = {}, {}
        for s in self.stages:
            z = tc.add(recalibrated[s], attended[s])
            out[s], ffn_caches[s] = self._ffn(params, f"msca.block{block}.ffn.stage{s}", z)
        return out, {"cca": cca_cache, "sca": sca_cache, "ffn": ffn_caches, "inputs": tokens,
                     "recalibrated": recalibrated, "outputs": out}

    def msca_block_backward(
        self, params: ParamStore, grad: TokenSet, cache: dict, grads: ParamStore, block: int = 0
    ) -> TokenSet:
        g_z = {s: self._ffn_backward(params, f"msca.block{block}.ffn.stage{s}", grad[s], cache["ffn"][s], grads)
               for s in self.stages}
        g_rec = self.sca_backward(params, g_z, cache["sca"], grads, block)
        g_rec = {s: g_rec[s] + g_z[s] for s in self.stages}
        return self.cca_backward(params, g_rec, cache["cca"], grads, block)

    def forward(self, params: ParamStore, ctx: ForwardContext, tokens: TokenSet) -> Tuple[TokenSet, List[dict]]:
        caches = []
        for j in range(self.config.num_msca_blocks):
            tokens, cache = self.msca_block(params, ctx, tokens, j)
            caches.append(cache)
        return tokens, caches

    def backward(self, params: ParamStore, grad: TokenSet, caches: List[dict], grads: ParamStore) -> TokenSet:
        for j in reversed(range(len(caches))):
            grad = self.msca_block_backward(params, grad, caches[j], grads, j)
        return grad

    def state(self, cache: dict) -> McaState:
        """Collect one block's intermediates into an McaState."""
        cca, sca = cache["cca"], cache["sca"]
        state = McaState(stages=list(self.stages), cross_stage=sca["cross"])
        state.inputs = cache["inputs"]
        state.recalibrated = cache["recalibrated"]
        state.outputs = cache["outputs"]
        if cca is not None:
            state.descriptors = cca["descriptors"]
            state.joint_descriptor = cca["joint"]
            state.channel_scores = cca["scores"]
            state.stage_scores = cca["stage_scores"]
        state.queries, state.keys, state.values = sca["q"], sca["k"], sca["v"]
        state.attention = {s: sca["att"][s][3] for s in self.stages}
        return state


def extract_attention_maps(
    state: McaState,
    selections: Dict[int, SelectedSet],
    query_stage: int,
    query_row: int,
    sample: int = 0,
    head: Optional[int] = None,
    block: int = 0,
) -> AttentionDump:
    """Weights of one query over every key it attends to.

    Each record is tagged with the key's merged-grid index from the stage's
    selection; CLS rows get index -1.
    """
    if query_stage not in state.attention:
        raise TensorIndexError(f"query stage {query_stage} not in active stages {state.stages}")
    probs = state.attention[query_stage]
    batch, heads, rows, _ = probs.shape
    if not 0 <= query_row < rows:
        raise TensorIndexError(f"query row {query_row} out of range [0, {rows}) for stage {query_stage}")
    if not 0 <= sample < batch:
        raise TensorIndexError(f"sample {sample} out of range [0, {batch})")
    if head is not None and not 0 <= head < heads:
        raise TensorIndexError(f"head {head} out of range [0, {heads})")
    weights = probs[sample, :, query_row].mean(axis=0) if head is None else probs[sample, head, query_row]

    key_stages = state.stages if state.cross_stage else [query_stage]
    records = np.zeros(weights.shape[0], dtype=ATTENTION_RECORD_DTYPE)
    records["query_stage"] = query_stage
    records["query_row"] = query_row
    records["weight"] = weights
    offset = 0
    for s in key_stages:
        indices = selections[s].indices[sample]
        n = state.keys[s].shape[1]
        grid_index = np.full(n, -1, dtype=np.int32)
        grid_index[:indices.shape[0]] = indices
        records["key_stage"][offset:offset + n] = s
        records["key_row"][offset:offset + n] = np.arange(n)
        records["merged_grid_index"][offset:offset + n] = grid_index
        offset += n
    return AttentionDump(block=block, sample=sample, head=-1 if head is None else head, records=records)
