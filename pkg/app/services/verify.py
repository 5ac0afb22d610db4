"""Gradient checks and naive reference implementations.

The reference functions below use explicit Python loops over rows, heads and
channels and never call into ``tensor_core`` or ``attention``; they only share
the array type with the code they check.

A block check builds a micro-scale config in f64, wires a scalar probe
L = Σ out ⊙ R (R fixed and random) behind the block, and compares the
block's analytic gradient with central differences on at most
``max_coords`` sampled coordinates.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import ConfigError, OracleError
from app.knowledge_base.presets import MICRO
from app.models.config import ModelConfig, build_model_config, with_overrides
from app.models.records import PredictionSet, StageOutput
from app.models.results import GradReport, GradThresholds
from app.services import tensor_core as tc
from app.services.backbone import Backbone
from app.services.crossattn import MultiScaleCrossAttention
from app.services.heads import ClassifierHeads, total_loss, total_loss_backward
from app.services.model import MultiScaleModel
from app.services.params import ForwardContext, ParamStore
from app.services.selection import PatchSelector, select_patches_backward
from app.services.transfer import ClassTokenTransfer

logger = logging.getLogger(__name__)

BLOCKS = ("patch_embed", "run_stage", "select_patches", "transfer_cls", "cca", "sca", "msca_block", "heads")
CHECK_BATCH = 3
CHECK_INIT_STD = 0.2


# ----------------------------------------------------------------------
# Finite differences
# ----------------------------------------------------------------------

def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5, coords: Optional[Sequence[int]] = None
) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``.

    With ``coords`` (flat indices) only those coordinates are evaluated and a
    vector is returned; otherwise the full gradient with ``x``'s shape.
    """
    work = np.array(x, dtype=np.float64, copy=True)
    flat = work.reshape(-1)
    picked = range(flat.size) if coords is None else coords
    out = np.zeros(len(picked), dtype=np.float64)
    for n, j in enumerate(picked):
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = f(work)
        flat[j] = orig - eps
        f_minus = f(work)
        flat[j] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise OracleError(f"finite_diff_grad: f is not finite around coordinate {j}")
        out[n] = (f_plus - f_minus) / (2.0 * eps)
    return out.reshape(x.shape) if coords is None else out


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|a − b| / max(|a|, |b|, 1e-8), elementwise."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


# ----------------------------------------------------------------------
# Naive references
# ----------------------------------------------------------------------

def _dot(u, v) -> float:
    total = 0.0
    for a, b in zip(u, v):
        total += float(a) * float(b)
    return total


def _project(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    rows, cols = x.shape[0], w.shape[1]
    out = np.zeros((rows, cols), dtype=np.float64)
    for i in range(rows):
        for j in range(cols):
            out[i, j] = _dot(x[i], w[:, j])
    return out


def reference_attention(
    x: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray, wo: np.ndarray,
    heads: int, scale: Optional[float] = None,
) -> np.ndarray:
    """Multi-head self-attention of one ``(m, c)`` token matrix, by loops.

    Q, K, V project to width d; each head attends on its d/heads slice with
    ``scale`` (default 1/√d); heads are concatenated and mapped back by ``wo``.
    """
    m = x.shape[0]
    d = wq.shape[1]
    dh = d // heads
    scale = 1.0 / math.sqrt(d) if scale is None else scale
    q, k, v = _project(x, wq), _project(x, wk), _project(x, wv)
    attended = np.zeros((m, d), dtype=np.float64)
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        for i in range(m):
            logits = [_dot(q[i, lo:hi], k[j, lo:hi]) * scale for j in range(m)]
            top = max(logits)
            weights = [math.exp(z - top) for z in logits]
            norm = sum(weights)
            for t in range(lo, hi):
                attended[i, t] = sum(weights[j] / norm * v[j, t] for j in range(m))
    return _project(attended, wo)


def reference_merge_neighbors(features: np.ndarray, r: int) -> np.ndarray:
    """``(h, w, c)`` -> ``(h·w/r², c)``, block means in row-major block order."""
    h, w, c = features.shape
    out = np.zeros(((h // r) * (w // r), c), dtype=np.float64)
    for bi in range(h // r):
        for bj in range(w // r):
            g = bi * (w // r) + bj
            for ch in range(c):
                total = 0.0
                for di in range(r):
                    for dj in range(r):
                        total += float(features[bi * r + di, bj * r + dj, ch])
                out[g, ch] = total / (r * r)
    return out


def reference_topk(scores: np.ndarray, k: int) -> List[int]:
    """Full sort by (−score, index)."""
    return sorted(range(len(scores)), key=lambda j: (-float(scores[j]), j))[:k]


def reference_cca(
    tokens: Dict[int, np.ndarray], w0: np.ndarray, w1: np.ndarray,
    gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5,
) -> Dict[int, np.ndarray]:
    """Channel recalibration with batch-statistics BN, written element by element."""
    stages = sorted(tokens)
    batch = tokens[stages[0]].shape[0]
    joint = []
    for n in range(batch):
        row = []
        for s in stages:
            t = tokens[s][n]
            for ch in range(t.shape[1]):
                row.append(sum(float(t[i, ch]) for i in range(t.shape[0])) / t.shape[0])
        joint.append(row)
    hidden = [[_dot(w0[o], joint[n]) for o in range(w0.shape[0])] for n in range(batch)]
    normed = [[0.0] * w0.shape[0] for _ in range(batch)]
    for o in range(w0.shape[0]):
        mu = sum(hidden[n][o] for n in range(batch)) / batch
        var = sum((hidden[n][o] - mu) ** 2 for n in range(batch)) / batch
        for n in range(batch):
            normed[n][o] = max((hidden[n][o] - mu) / math.sqrt(var + eps) * gamma[o] + beta[o], 0.0)
    out = {s: np.zeros_like(tokens[s], dtype=np.float64) for s in stages}
    for n in range(batch):
        offset = 0
        for s in stages:
            t = tokens[s][n]
            for ch in range(t.shape[1]):
                score = 1.0 / (1.0 + math.exp(-_dot(w1[offset + ch], normed[n])))
                for i in range(t.shape[0]):
                    out[s][n, i, ch] = t[i, ch] * score + t[i, ch]
            offset += t.shape[1]
    return out


def reference_total_loss(predictions: PredictionSet, targets: Sequence[int], alpha_schedule: Sequence[float]) -> float:
    """Σ_heads Σ_t −ŷ_t log y_t per sample, averaged, by explicit double sums."""
    batch = len(targets)
    total = 0.0
    for name in predictions.heads:
        alpha = alpha_schedule[int(name[5:]) - 1] if name.startswith("stage") else alpha_schedule[-1]
        probs = predictions.probs[name]
        n_classes = probs.shape[-1]
        for b in range(batch):
            for t in range(n_classes):
                label = alpha if t == targets[b] else (1.0 - alpha) / n_classes
                total -= label * math.log(max(float(probs[b, t]), 1e-12))
    return total / batch


# ----------------------------------------------------------------------
# Block checks
# ----------------------------------------------------------------------

def micro_config(**overrides) -> ModelConfig:
    config = build_model_config(dict(MICRO))
    return with_overrides(config, **overrides) if overrides else config


def _bind(target: np.ndarray, forward: Callable[[], float]) -> Callable[[np.ndarray], float]:
    """Turn a closure over ``target`` into a function of ``target``'s value."""
    original = target.copy()

    def f(x: np.ndarray) -> float:
        target[...] = x
        try:
            return forward()
        finally:
            target[...] = original

    return f


def _probe(out: np.ndarray, weights: np.ndarray) -> float:
    return float(np.sum(out * weights))


def compare_gradients(
    block: str,
    seed: int,
    thresholds: GradThresholds,
    tensors: Dict[str, np.ndarray],
    analytic: Dict[str, np.ndarray],
    forward: Callable[[], float],
    rng: np.random.Generator,
) -> GradReport:
    """Sample coordinates over ``tensors`` and compare against ``analytic``.

    A coordinate is left unscored only when its disagreement is at most
    ``negligible`` times the largest gradient magnitude sampled in the report,
    so a gradient that is uniformly tiny is still scored.
    """
    names = list(tensors)
    if len(names) > thresholds.max_coords:
        keep = set(rng.choice(len(names), size=thresholds.max_coords, replace=False).tolist())
        names = [n for i, n in enumerate(names) if i in keep]
    per_tensor = max(1, thresholds.max_coords // max(len(names), 1))
    exact_parts, numeric_parts = [], []
    checked = 0
    for name in names:
        if checked >= thresholds.max_coords:
            break
        target = tensors[name]
        count = min(per_tensor, target.size, thresholds.max_coords - checked)
        coords = np.sort(rng.choice(target.size, size=count, replace=False))
        numeric_parts.append(finite_diff_grad(_bind(target, forward), target, thresholds.eps, coords))
        exact_parts.append(np.asarray(analytic[name], dtype=np.float64).reshape(-1)[coords])
        checked += count
    exact = np.concatenate(exact_parts) if exact_parts else np.zeros(0)
    numeric = np.concatenate(numeric_parts) if numeric_parts else np.zeros(0)
    diff = np.abs(exact - numeric)
    scale = float(np.maximum(np.abs(exact), np.abs(numeric)).max()) if checked else 0.0
    scored = diff > thresholds.negligible * scale
    worst_rel = float(relative_error(exact[scored], numeric[scored]).max()) if scored.any() else 0.0
    worst_abs = float(diff[scored].max()) if scored.any() else 0.0
    return GradReport(
        block=block,
        seed=seed,
        parameters=names,
        coords_checked=checked,
        negligible_coords=int(checked - scored.sum()),
        max_relative_error=worst_rel,
        max_absolute_error=worst_abs,
        threshold=thresholds.rel_tol,
        passed=checked > 0 and worst_rel < thresholds.rel_tol,
    )


def _setup(seed: int, config: Optional[ModelConfig]) -> Tuple[ModelConfig, ParamStore, ParamStore, np.random.Generator]:
    config = with_overrides(config or micro_config(), seed=seed)
    params, buffers = MultiScaleModel(config).init_params(np.float64, CHECK_INIT_STD)
    return config, params, buffers, tc.stream_rng(seed, 7)


def _tokens(config: ModelConfig, rng: np.random.Generator) -> Dict[int, np.ndarray]:
    return {
        s: rng.standard_normal((CHECK_BATCH, config.rows(s), config.channels(s)))
        for s in config.msps_stages
    }


def _with_prefix(params: ParamStore, *prefixes: str) -> Dict[str, np.ndarray]:
    return {k: v for k, v in params.items() if k.startswith(prefixes)}


def _check_patch_embed(seed, thresholds, config, params, buffers, rng) -> GradReport:
    bb = Backbone(config)
    images = rng.standard_normal((CHECK_BATCH, config.input_size, config.input_size, config.in_channels))
    grid, cache = bb.patch_embed(params, images)
    r = rng.standard_normal(grid.shape)
    grads: ParamStore = {}
    grads["images"] = bb.patch_embed_backward(params, r, cache, grads)
    tensors = {"images": images, **_with_prefix(params, "patch_embed.")}
    return compare_gradients(
        "patch_embed", seed, thresholds, tensors, grads,
        lambda: _probe(bb.patch_embed(params, images)[0], r), rng,
    )


def _check_run_stage(seed, thresholds, config, params, buffers, rng) -> GradReport:
    bb, stage = Backbone(config), 2
    side, c = config.resolution(stage), config.channels(stage)
    features = rng.standard_normal((CHECK_BATCH, side, side, c))
    cls = rng.standard_normal((CHECK_BATCH, c))
    out, nxt, cache = bb.run_stage(params, StageOutput(features, cls), stage)
    weights = [rng.standard_normal(a.shape) for a in (out.features, out.cls, nxt.features, nxt.cls)]

    def forward() -> float:
        o, n, _ = bb.run_stage(params, StageOutput(features, cls), stage, keep_cache=False)
        return sum(_probe(a, w) for a, w in zip((o.features, o.cls, n.features, n.cls), weights))

    grads: ParamStore = {}
    g_in = bb.run_stage_backward(
        params, stage, (weights[0], weights[1]), StageOutput(weights[2], weights[3]), cache, grads
    )
    grads["features"], grads["cls"] = g_in.features, g_in.cls
    tensors = {"features": features, "cls": cls, **_with_prefix(params, f"stage{stage}.")}
    return compare_gradients("run_stage", seed, thresholds, tensors, grads, forward, rng)


def _check_select_patches(seed, thresholds, config, params, buffers, rng) -> GradReport:
    selector, stage = PatchSelector(config), 1
    side, c = config.resolution(stage), config.channels(stage)
    features = rng.standard_normal((CHECK_BATCH, side, side, c))
    cls = np.zeros((CHECK_BATCH, c))
    selected = selector.select(StageOutput(features, cls), stage)
    r = rng.standard_normal(selected.patches.shape)
    grads = {"features": selector.backward(r, selected)}

    merged_grad = select_patches_backward(r, selected)
    unselected = np.ones(merged_grad.shape[:2], dtype=bool)
    for n in range(CHECK_BATCH):
        unselected[n, selected.indices[n]] = False
    zero_ok = bool(np.all(merged_grad[unselected] == 0.0))

    report = compare_gradients(
        "select_patches", seed, thresholds, {"features": features}, grads,
        lambda: _probe(selector.select(StageOutput(features, cls), stage).patches, r), rng,
    )
    report.unselected_grad_zero = zero_ok
    report.passed = report.passed and zero_ok
    return report


def _check_transfer_cls(seed, thresholds, config, params, buffers, rng) -> GradReport:
    transfer, stage = ClassTokenTransfer(config), 1
    cls_g = rng.standard_normal((CHECK_BATCH, config.channels(4)))
    ctx = ForwardContext(buffers=buffers)
    out, cache = transfer.transfer_cls(params, ctx, cls_g, stage)
    r = rng.standard_normal(out.shape)
    grads: ParamStore = {}
    grads["cls_g"] = transfer.transfer_backward(params, r, stage, cache, grads)
    tensors = {"cls_g": cls_g, **_with_prefix(params, f"transfer.stage{stage}.")}
    return compare_gradients(
        "transfer_cls", seed, thresholds, tensors, grads,
        lambda: _probe(transfer.transfer_cls(params, ForwardContext(buffers=buffers), cls_g, stage)[0], r), rng,
    )


def _check_token_block(name, seed, thresholds, config, params, buffers, rng) -> GradReport:
    msca = MultiScaleCrossAttention(config)
    tokens = _tokens(config, rng)
    fwd = {"cca": msca.cca, "sca": msca.sca, "msca_block": msca.msca_block}[name]
    out, cache = fwd(params, ForwardContext(buffers=buffers), tokens)
    weights = {s: rng.standard_normal(out[s].shape) for s in out}

    def forward() -> float:
        o, _ = fwd(params, ForwardContext(buffers=buffers), tokens)
        return sum(_probe(o[s], weights[s]) for s in o)

    grads: ParamStore = {}
    bwd = {"cca": msca.cca_backward, "sca": msca.sca_backward, "msca_block": msca.msca_block_backward}[name]
    g_tokens = bwd(params, weights, cache, grads)
    prefix = {"cca": "msca.block0.cca.", "sca": "msca.block0.sca.", "msca_block": "msca.block0."}[name]
    tensors = {f"tokens{s}": tokens[s] for s in tokens}
    tensors.update(_with_prefix(params, prefix))
    grads.update({f"tokens{s}": g_tokens[s] for s in g_tokens})
    return compare_gradients(name, seed, thresholds, tensors, grads, forward, rng)


def _check_heads(seed, thresholds, config, params, buffers, rng) -> GradReport:
    heads = ClassifierHeads(config)
    tokens = _tokens(config, rng)
    targets = rng.integers(0, config.num_classes, size=CHECK_BATCH)
    predictions, cache = heads.stage_predictions(params, tokens)
    grads: ParamStore = {}
    g_logits = total_loss_backward(predictions, targets, config.alpha_schedule)
    g_tokens = heads.stage_predictions_backward(params, g_logits, cache, grads)
    grads.update({f"tokens{s}": g_tokens[s] for s in g_tokens})
    tensors = {f"tokens{s}": tokens[s] for s in tokens}
    tensors.update(_with_prefix(params, "heads."))
    return compare_gradients(
        "heads", seed, thresholds, tensors, grads,
        lambda: total_loss(heads.stage_predictions(params, tokens)[0], targets, config.alpha_schedule), rng,
    )


_CHECKS = {
    "patch_embed": _check_patch_embed,
    "run_stage": _check_run_stage,
    "select_patches": _check_select_patches,
    "transfer_cls": _check_transfer_cls,
    "heads": _check_heads,
}


def check_block(
    block: str, seed: int, thresholds: Optional[GradThresholds] = None, config: Optional[ModelConfig] = None
) -> GradReport:
    """Finite-difference check of one block at f64 on a micro config."""
    if block not in BLOCKS:
        raise ConfigError(f"Unknown block {block!r}; expected one of {list(BLOCKS)}")
    thresholds = thresholds or GradThresholds()
    config, params, buffers, rng = _setup(seed, config)
    if block in ("cca", "sca", "msca_block"):
        report = _check_token_block(block, seed, thresholds, config, params, buffers, rng)
    else:
        report = _CHECKS[block](seed, thresholds, config, params, buffers, rng)
    level = logging.INFO if report.passed else logging.WARNING
    logger.log(level, f"{block} seed {seed}: max rel err {report.max_relative_error:.2e} "
                      f"over {report.coords_checked} coords ({'pass' if report.passed else 'FAIL'})")
    return report


def check_model(seed: int, thresholds: Optional[GradThresholds] = None, config: Optional[ModelConfig] = None) -> GradReport:
    """Finite-difference check of total_loss∘model over sampled parameters."""
    thresholds = thresholds or GradThresholds()
    config, params, buffers, rng = _setup(seed, config)
    model = MultiScaleModel(config)
    images = rng.standard_normal((CHECK_BATCH, config.input_size, config.input_size, config.in_channels))
    targets = rng.integers(0, config.num_classes, size=CHECK_BATCH)

    def forward() -> float:
        output = model.forward(params, ForwardContext(buffers=buffers, keep_cache=False), images)
        return total_loss(output.predictions, targets, config.alpha_schedule)

    _, grads, _ = model.loss_and_grads(params, ForwardContext(buffers=buffers), images, targets)
    report = compare_gradients("model", seed, thresholds, dict(params), grads, forward, rng)
    logger.info(f"model seed {seed}: max rel err {report.max_relative_error:.2e}")
    return report


def run_checks(
    blocks: Sequence[str],
    seeds: Sequence[int],
    thresholds: Optional[GradThresholds] = None,
    workers: int = 1,
) -> List[GradReport]:
    """All (block, seed) checks; reports come back in (block, seed) order either way."""
    jobs = [(b, s) for b in blocks for s in seeds]

    def run(job: Tuple[str, int]) -> GradReport:
        block, seed = job
        return check_model(seed, thresholds) if block == "model" else check_block(block, seed, thresholds)

    if workers <= 1:
        return [run(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, jobs))
