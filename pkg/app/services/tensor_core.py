"""Dense tensor primitives and their vector-Jacobian products.

Tensors are plain C-contiguous ``numpy.ndarray`` values (row-major, last axis
fastest). Every primitive treats its inputs as immutable, returns a fresh
array and refuses to hand back NaN or Inf. Backward functions take the
upstream gradient plus whatever the forward needs and return gradients for
each differentiable input.

Reductions go through numpy's fixed pairwise summation, so two runs on the
same platform and thread count produce bit-identical results.
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import DimensionError, NonFiniteError, SelectionError, TensorIndexError

Tensor = np.ndarray
IndexList = np.ndarray

DTYPES = {"f32": np.float32, "f64": np.float64}
BN_MOMENTUM = 0.1
NORM_EPS = 1e-5


def resolve_dtype(precision: str) -> np.dtype:
    """Map ``f32``/``f64`` to a numpy dtype."""
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise DimensionError(f"Unknown precision {precision!r}; expected one of {sorted(DTYPES)}")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator.

    PCG64 is numpy's documented default bit generator; its stream for a given
    seed is fixed across platforms.
    """
    return np.random.Generator(np.random.PCG64(seed))


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Generator for an independent sub-stream (batch order, sampling) of one seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([stream, seed])))


def check_finite(x: Tensor, op: str) -> Tensor:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{op} produced non-finite values (shape {x.shape})")
    return x


def as_tensor(data, dtype=None) -> Tensor:
    """Copy ``data`` into a contiguous array and validate it."""
    arr = np.ascontiguousarray(np.array(data, dtype=dtype))
    return check_finite(arr, "as_tensor")


def unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """C[..., i, j] = sum_t A[..., i, t] * B[..., t, j]."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return check_finite(np.matmul(a, b), "matmul")


def matmul_backward(grad: Tensor, a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
    if b.ndim == 2 and a.ndim > 2:
        k, n = b.shape
        grad_b = a.reshape(-1, k).T @ grad.reshape(-1, n)
    else:
        grad_b = unbroadcast(np.matmul(np.swapaxes(a, -1, -2), grad), b.shape)
    return grad_a, grad_b


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Row-convention affine map ``x @ weight + bias``."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def linear_backward(grad: Tensor, x: Tensor, weight: Tensor, has_bias: bool) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
    grad_x, grad_w = matmul_backward(grad, x, weight)
    grad_b = unbroadcast(grad, (weight.shape[1],)) if has_bias else None
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# Elementwise
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return check_finite(a + b, "add")


def add_backward(grad: Tensor, a_shape: Tuple[int, ...], b_shape: Tuple[int, ...]) -> Tuple[Tensor, Tensor]:
    return unbroadcast(grad, a_shape), unbroadcast(grad, b_shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    return check_finite(a * b, "mul")


def mul_backward(grad: Tensor, a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    return unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad: Tensor, x: Tensor) -> Tensor:
    return grad * (x > 0)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form keeps large |x| from overflowing and gives sigmoid(0) == 0.5 exactly
    return check_finite(0.5 * (1.0 + np.tanh(0.5 * x)), "sigmoid")


def sigmoid_backward(grad: Tensor, y: Tensor) -> Tensor:
    return grad * y * (1.0 - y)


# --------------------------------------------------------------------------
# Reductions and layout
# --------------------------------------------------------------------------

def _check_axis(x: Tensor, axis: int, op: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def mean(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    axis = _check_axis(x, axis, "mean")
    return check_finite(x.mean(axis=axis, keepdims=keepdims), "mean")


def mean_backward(grad: Tensor, shape: Tuple[int, ...], axis: int, keepdims: bool = False) -> Tensor:
    axis = axis % len(shape)
    if not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad / shape[axis], shape).copy()


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise DimensionError("concat: nothing to concatenate")
    axis = _check_axis(parts[0], axis, "concat")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise DimensionError(f"concat: shape {p.shape} incompatible with {ref} along axis {axis}")
    return np.concatenate(parts, axis=axis)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> List[Tensor]:
    """Inverse of ``concat``: cut ``x`` into consecutive pieces of ``sizes``."""
    axis = _check_axis(x, axis, "split")
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not sum to extent {x.shape[axis]}")
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(x, bounds, axis=axis)]


def block_mean(grid: Tensor, r: int) -> Tensor:
    """Average non-overlapping r×r blocks of a ``(..., h, w, c)`` grid."""
    *lead, h, w, c = grid.shape
    if h % r or w % r:
        raise DimensionError(f"block_mean: grid {h}x{w} not divisible by {r}")
    blocks = grid.reshape(*lead, h // r, r, w // r, r, c)
    return check_finite(blocks.mean(axis=(-4, -2)), "block_mean")


def block_mean_backward(grad: Tensor, r: int) -> Tensor:
    *lead, hr, wr, c = grad.shape
    spread = np.broadcast_to(
        (grad / (r * r))[..., :, None, :, None, :], (*lead, hr, r, wr, r, c)
    )
    return spread.reshape(*lead, hr * r, wr * r, c)


# --------------------------------------------------------------------------
# Softmax, selection
# --------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return check_finite(e / e.sum(axis=-1, keepdims=True), "softmax_rows")


def softmax_backward(grad: Tensor, y: Tensor) -> Tensor:
    return y * (grad - (grad * y).sum(axis=-1, keepdims=True))


def topk_indices(scores: Tensor, k: int) -> IndexList:
    """Indices of the k largest scores, descending; ties go to the lower index."""
    if scores.ndim != 1:
        raise DimensionError(f"topk_indices: expected a vector, got shape {scores.shape}")
    if not 1 <= k <= scores.shape[0]:
        raise SelectionError(f"topk_indices: k={k} not in [1, {scores.shape[0]}]")
    order = np.argsort(-scores, kind="stable")
    return order[:k].astype(np.int64)


def gather_rows(x: Tensor, indices: IndexList) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"gather_rows: expected a matrix, got shape {x.shape}")
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise TensorIndexError(f"gather_rows: indices out of range [0, {x.shape[0]})")
    return x[indices]


def gather_rows_backward(grad: Tensor, indices: IndexList, num_rows: int) -> Tensor:
    """Scatter-add ``grad`` rows back to their source rows; other rows get zero."""
    out = np.zeros((num_rows, grad.shape[1]), dtype=grad.dtype)
    np.add.at(out, np.asarray(indices, dtype=np.int64), grad)
    return out


# --------------------------------------------------------------------------
# Normalization
# --------------------------------------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = NORM_EPS,
) -> Tuple[Tensor, tuple, Tuple[Tensor, Tensor]]:
    """Normalize ``(B, C)`` over the batch axis.

    Returns the output, a backward cache and the updated running statistics
    (unchanged in eval mode).
    """
    if x.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batch_norm: input {x.shape} does not match {gamma.shape[0]} features")
    if training:
        n = x.shape[0]
        if n < 2:
            raise DimensionError("batch_norm: batch statistics need at least 2 samples")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        new_mean = (1 - momentum) * running_mean + momentum * mu
        new_var = (1 - momentum) * running_var + momentum * var * (n / (n - 1))
    else:
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mu) * inv_std
    out = check_finite(x_hat * gamma + beta, "batch_norm")
    cache = (x_hat, inv_std, gamma, training)
    return out, cache, (new_mean.astype(x.dtype), new_var.astype(x.dtype))


def batch_norm_backward(grad: Tensor, cache: tuple) -> Tuple[Tensor, Tensor, Tensor]:
    x_hat, inv_std, gamma, training = cache
    grad_gamma = (grad * x_hat).sum(axis=0)
    grad_beta = grad.sum(axis=0)
    g = grad * gamma
    if training:
        n = grad.shape[0]
        grad_x = inv_std / n * (n * g - g.sum(axis=0) - x_hat * (g * x_hat).sum(axis=0))
    else:
        grad_x = g * inv_std
    return grad_x, grad_gamma, grad_beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tuple[Tensor, tuple]:
    """Per-token normalization over the last axis."""
    if x.shape[-1] != gamma.shape[0]:
        raise DimensionError(f"layer_norm: width {x.shape[-1]} does not match {gamma.shape[0]}")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mu) * inv_std
    return check_finite(x_hat * gamma + beta, "layer_norm"), (x_hat, inv_std, gamma)


def layer_norm_backward(grad: Tensor, cache: tuple) -> Tuple[Tensor, Tensor, Tensor]:
    x_hat, inv_std, gamma = cache
    c = x_hat.shape[-1]
    grad_gamma = unbroadcast(grad * x_hat, gamma.shape)
    grad_beta = unbroadcast(grad, gamma.shape)
    g = grad * gamma
    grad_x = inv_std / c * (
        c * g - g.sum(axis=-1, keepdims=True) - x_hat * (g * x_hat).sum(axis=-1, keepdims=True)
    )
    return grad_x, grad_gamma, grad_beta
