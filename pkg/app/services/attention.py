"""Multi-head scaled dot-product attention shared by the backbone and SCA.

Queries and keys/values may come from different token sets: the backbone
attends a stage's tokens to themselves, SCA attends one stage's queries to the
keys and values of every stage.
"""

from typing import Optional, Tuple

import numpy as np

from app.exceptions import DimensionError
from app.services import tensor_core as tc

# Query rows per chunk when no backward cache is kept.
INFERENCE_CHUNK = 1024


def split_heads(x: tc.Tensor, heads: int) -> tc.Tensor:
    """``(B, N, d)`` -> ``(B, heads, N, d / heads)``."""
    b, n, d = x.shape
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    return np.ascontiguousarray(x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3))


def merge_heads(x: tc.Tensor) -> tc.Tensor:
    b, h, n, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3).reshape(b, n, h * dh))


def attention_forward(
    q: tc.Tensor,
    k: tc.Tensor,
    v: tc.Tensor,
    heads: int,
    scale: float,
    keep_cache: bool = True,
) -> Tuple[tc.Tensor, Optional[tuple]]:
    """softmax(q kᵀ · scale) v per head, re-concatenated to ``(B, Nq, d)``.

    With ``keep_cache`` the attention probabilities are returned in the cache
    as ``(B, heads, Nq, Nk)``. Without it, queries are processed in chunks and
    nothing is retained.
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not line up")
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    kt = np.swapaxes(kh, -1, -2)
    if keep_cache:
        probs = tc.softmax_rows(tc.matmul(qh, kt) * scale)
        out = tc.matmul(probs, vh)
        return merge_heads(out), (qh, kh, vh, probs, scale)

    n = qh.shape[2]
    chunks = []
    for start in range(0, n, INFERENCE_CHUNK):
        probs = tc.softmax_rows(tc.matmul(qh[:, :, start:start + INFERENCE_CHUNK], kt) * scale)
        chunks.append(tc.matmul(probs, vh))
    return merge_heads(np.concatenate(chunks, axis=2)), None


def attention_backward(grad: tc.Tensor, cache: tuple) -> Tuple[tc.Tensor, tc.Tensor, tc.Tensor]:
    qh, kh, vh, probs, scale = cache
    g = split_heads(grad, qh.shape[1])
    grad_probs, grad_vh = tc.matmul_backward(g, probs, vh)
    grad_scores = tc.softmax_backward(grad_probs, probs) * scale
    grad_qh, grad_kt = tc.matmul_backward(grad_scores, qh, np.swapaxes(kh, -1, -2))
    return merge_heads(grad_qh), merge_heads(np.swapaxes(grad_kt, -1, -2)), merge_heads(grad_vh)
