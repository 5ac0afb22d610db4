import math

import numpy as np
import pytest

from app.exceptions import DimensionError
from app.services.attention import (
    INFERENCE_CHUNK,
    attention_backward,
    attention_forward,
    merge_heads,
    split_heads,
)
from app.services.verify import finite_diff_grad, reference_attention


def test_split_merge_inverse(rng):
    x = rng.standard_normal((2, 5, 8))
    assert split_heads(x, 4).shape == (2, 4, 5, 2)
    np.testing.assert_array_equal(merge_heads(split_heads(x, 4)), x)


def test_head_divisibility():
    with pytest.raises(DimensionError):
        split_heads(np.zeros((1, 2, 6)), 4)


def test_matches_reference(rng):
    m, c, d, heads = 6, 5, 8, 2
    x = rng.standard_normal((m, c))
    wq, wk, wv = (rng.standard_normal((c, d)) for _ in range(3))
    wo = rng.standard_normal((d, c))
    out, _ = attention_forward((x @ wq)[None], (x @ wk)[None], (x @ wv)[None], heads, 1.0 / math.sqrt(d))
    np.testing.assert_allclose(out[0] @ wo, reference_attention(x, wq, wk, wv, wo, heads), atol=1e-10)


def test_single_token_returns_its_value(rng):
    x = rng.standard_normal((1, 4))
    wq, wk, wv = (rng.standard_normal((4, 4)) for _ in range(3))
    wo = rng.standard_normal((4, 4))
    np.testing.assert_allclose(reference_attention(x, wq, wk, wv, wo, 2), x @ wv @ wo, atol=1e-12)


def test_chunked_path_matches_cached(rng):
    n = INFERENCE_CHUNK + 7
    q = rng.standard_normal((1, n, 4))
    k = rng.standard_normal((1, 9, 4))
    v = rng.standard_normal((1, 9, 4))
    full, cache = attention_forward(q, k, v, 2, 0.5, keep_cache=True)
    chunked, none = attention_forward(q, k, v, 2, 0.5, keep_cache=False)
    assert none is None
    np.testing.assert_allclose(chunked, full, atol=1e-12)
    np.testing.assert_allclose(cache[3].sum(axis=-1), 1.0, atol=1e-12)


def test_backward_matches_finite_differences(rng):
    q = rng.standard_normal((2, 3, 4))
    k = rng.standard_normal((2, 5, 4))
    v = rng.standard_normal((2, 5, 4))
    r = rng.standard_normal((2, 3, 4))
    _, cache = attention_forward(q, k, v, 2, 0.7)
    dq, dk, dv = attention_backward(r, cache)
    for x, analytic in ((q, dq), (k, dk), (v, dv)):
        def f(value, x=x):
            saved = x.copy()
            x[...] = value
            out = float((attention_forward(q, k, v, 2, 0.7)[0] * r).sum())
            x[...] = saved
            return out
        np.testing.assert_allclose(finite_diff_grad(f, x), analytic, rtol=1e-6, atol=1e-9)
