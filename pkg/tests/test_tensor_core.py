import math

import numpy as np
import pytest

from app.exceptions import DimensionError, NonFiniteError, SelectionError, TensorIndexError
from app.services import tensor_core as tc
from app.services.verify import finite_diff_grad, reference_topk, relative_error


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(tc.matmul(a, np.eye(2)), a)

    def test_zero(self, rng):
        out = tc.matmul(np.zeros((3, 5)), rng.standard_normal((5, 2)))
        np.testing.assert_array_equal(out, np.zeros((3, 2)))

    def test_hand_computed(self):
        out = tc.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out, [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            tc.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_backward_batched_weight(self, rng):
        a = rng.standard_normal((2, 4, 3))
        b = rng.standard_normal((3, 5))
        g = rng.standard_normal((2, 4, 5))
        grad_a, grad_b = tc.matmul_backward(g, a, b)
        np.testing.assert_allclose(grad_a, g @ b.T)
        np.testing.assert_allclose(grad_b, sum(a[n].T @ g[n] for n in range(2)))


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(tc.softmax_rows(np.zeros((1, 3))), [[1 / 3] * 3])

    def test_large_values_do_not_overflow(self):
        np.testing.assert_allclose(tc.softmax_rows(np.array([[1000.0, 1000.0]])), [[0.5, 0.5]])

    def test_closed_form(self):
        np.testing.assert_allclose(tc.softmax_rows(np.array([[0.0, math.log(3.0)]])), [[0.25, 0.75]])


class TestTopK:
    def test_ordering(self):
        assert tc.topk_indices(np.array([0.1, 0.9, 0.5]), 2).tolist() == [1, 2]

    def test_ties_go_to_lower_index(self):
        assert tc.topk_indices(np.array([7.0, 7.0, 7.0]), 2).tolist() == [0, 1]

    def test_k_too_large(self):
        with pytest.raises(SelectionError):
            tc.topk_indices(np.zeros(3), 4)

    def test_matches_full_sort(self, rng):
        for _ in range(1000):
            size = int(rng.integers(1, 4097))
            scores = rng.standard_normal(size)
            if rng.random() < 0.2:
                scores = np.round(scores, 1)
            k = int(rng.integers(1, size + 1))
            assert tc.topk_indices(scores, k).tolist() == reference_topk(scores, k)


class TestGather:
    def test_identity_permutation(self, rng):
        x = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(tc.gather_rows(x, np.arange(5)), x)

    def test_duplicate_rows_accumulate(self):
        x = np.arange(12.0).reshape(4, 3)
        out = tc.gather_rows(x, [2, 2])
        np.testing.assert_array_equal(out, [x[2], x[2]])
        grad = tc.gather_rows_backward(np.ones((2, 3)), [2, 2], 4)
        np.testing.assert_array_equal(grad[2], [2.0, 2.0, 2.0])
        assert not grad[[0, 1, 3]].any()

    def test_matches_copy_loop(self, rng):
        x = rng.standard_normal((20, 4))
        idx = rng.integers(0, 20, size=7)
        expected = np.stack([x[i] for i in idx])
        np.testing.assert_array_equal(tc.gather_rows(x, idx), expected)

    def test_out_of_range(self):
        with pytest.raises(TensorIndexError):
            tc.gather_rows(np.zeros((3, 2)), [3])


class TestLayout:
    def test_split_inverts_concat(self, rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 5))
        left, right = tc.split(tc.concat([a, b], axis=1), [3, 5], axis=1)
        np.testing.assert_array_equal(left, a)
        np.testing.assert_array_equal(right, b)

    def test_mean_of_constant(self):
        np.testing.assert_array_equal(tc.mean(np.full((4, 3), 2.5), axis=0), [2.5, 2.5, 2.5])

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            tc.mean(np.zeros((2, 2)), axis=2)

    def test_concat_extent_mismatch(self):
        with pytest.raises(DimensionError):
            tc.concat([np.zeros((2, 3)), np.zeros((3, 3))], axis=1)


class TestNormalization:
    def test_batch_norm_needs_two_samples(self):
        with pytest.raises(DimensionError):
            tc.batch_norm(np.zeros((1, 2)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), training=True)

    def test_batch_norm_running_stats(self, rng):
        x = rng.standard_normal((6, 3))
        _, _, (mean, var) = tc.batch_norm(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=True)
        np.testing.assert_allclose(mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=0, ddof=1))

    def test_batch_norm_eval_uses_running_stats(self):
        x = np.array([[3.0], [5.0]])
        out, _, stats = tc.batch_norm(x, np.ones(1), np.zeros(1), np.array([1.0]), np.array([4.0]), training=False, eps=0.0)
        np.testing.assert_allclose(out, [[1.0], [2.0]])
        np.testing.assert_array_equal(stats[0], [1.0])

    def test_layer_norm_zero_mean_unit_variance(self, rng):
        out, _ = tc.layer_norm(rng.standard_normal((4, 8)) * 3 + 1, np.ones(8), np.zeros(8))
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_non_finite_is_refused():
    with pytest.raises(NonFiniteError):
        tc.as_tensor([1.0, float("nan")])


def test_resolve_dtype():
    assert tc.resolve_dtype("f64") == np.float64
    with pytest.raises(DimensionError):
        tc.resolve_dtype("f16")


def test_rng_is_reproducible():
    assert tc.make_rng(3).standard_normal(4).tolist() == tc.make_rng(3).standard_normal(4).tolist()
    assert tc.stream_rng(3, 1).integers(0, 1000, 8).tolist() != tc.stream_rng(3, 2).integers(0, 1000, 8).tolist()


# Each case builds (inputs, forward, backward) from a generator; backward maps
# the upstream gradient and the inputs to one gradient per input.

def _away_from_zero(rng, shape):
    return np.sign(rng.standard_normal(shape)) * (0.1 + np.abs(rng.standard_normal(shape)))


def _add_case(rng):
    inputs = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(4)}
    return inputs, tc.add, lambda g, a, b: dict(zip("ab", tc.add_backward(g, a.shape, b.shape)))


def _mul_case(rng):
    inputs = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((1, 4))}
    return inputs, tc.mul, lambda g, a, b: dict(zip("ab", tc.mul_backward(g, a, b)))


def _matmul_case(rng):
    inputs = {"a": rng.standard_normal((2, 3, 4)), "b": rng.standard_normal((4, 5))}
    return inputs, tc.matmul, lambda g, a, b: dict(zip("ab", tc.matmul_backward(g, a, b)))


def _relu_case(rng):
    return {"x": _away_from_zero(rng, (3, 5))}, tc.relu, lambda g, x: {"x": tc.relu_backward(g, x)}


def _sigmoid_case(rng):
    inputs = {"x": 2.0 * rng.standard_normal((3, 5))}
    return inputs, tc.sigmoid, lambda g, x: {"x": tc.sigmoid_backward(g, tc.sigmoid(x))}


def _softmax_case(rng):
    inputs = {"x": rng.standard_normal((2, 3, 5))}
    return inputs, tc.softmax_rows, lambda g, x: {"x": tc.softmax_backward(g, tc.softmax_rows(x))}


def _mean_case(rng):
    inputs = {"x": rng.standard_normal((3, 4, 2))}
    return inputs, lambda x: tc.mean(x, axis=1), lambda g, x: {"x": tc.mean_backward(g, x.shape, axis=1)}


def _concat_case(rng):
    inputs = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal((2, 4))}
    forward = lambda a, b: tc.concat([a, b], axis=1)
    return inputs, forward, lambda g, a, b: dict(zip("ab", tc.split(g, [3, 4], axis=1)))


def _split_case(rng):
    # the pieces are weighted differently so a swapped backward would show
    forward = lambda x: tc.concat([2.0 * p for p in tc.split(x, [1, 3], axis=0)], axis=0)
    backward = lambda g, x: {"x": tc.concat(tc.split(2.0 * g, [1, 3], axis=0), axis=0)}
    return {"x": rng.standard_normal((4, 3))}, forward, backward


def _block_mean_case(rng):
    inputs = {"grid": rng.standard_normal((2, 4, 6, 3))}
    return inputs, lambda grid: tc.block_mean(grid, 2), lambda g, grid: {"grid": tc.block_mean_backward(g, 2)}


def _gather_case(rng):
    indices = [4, 1, 1, 0]
    forward = lambda x: tc.gather_rows(x, indices)
    return {"x": rng.standard_normal((6, 3))}, forward, lambda g, x: {"x": tc.gather_rows_backward(g, indices, 6)}


def _batch_norm_case(training):
    def case(rng):
        running = (rng.standard_normal(4), 0.5 + rng.random(4))
        inputs = {"x": rng.standard_normal((6, 4)), "gamma": 1.0 + rng.random(4), "beta": rng.standard_normal(4)}

        def forward(x, gamma, beta):
            return tc.batch_norm(x, gamma, beta, *running, training=training)[0]

        def backward(g, x, gamma, beta):
            cache = tc.batch_norm(x, gamma, beta, *running, training=training)[1]
            return dict(zip(("x", "gamma", "beta"), tc.batch_norm_backward(g, cache)))

        return inputs, forward, backward

    return case


def _layer_norm_case(rng):
    inputs = {"x": rng.standard_normal((2, 3, 5)), "gamma": 1.0 + rng.random(5), "beta": rng.standard_normal(5)}

    def backward(g, x, gamma, beta):
        return dict(zip(("x", "gamma", "beta"), tc.layer_norm_backward(g, tc.layer_norm(x, gamma, beta)[1])))

    return inputs, lambda x, gamma, beta: tc.layer_norm(x, gamma, beta)[0], backward


PRIMITIVES = {
    "add": _add_case,
    "mul": _mul_case,
    "matmul": _matmul_case,
    "relu": _relu_case,
    "sigmoid": _sigmoid_case,
    "softmax_rows": _softmax_case,
    "mean": _mean_case,
    "concat": _concat_case,
    "split": _split_case,
    "block_mean": _block_mean_case,
    "gather_rows": _gather_case,
    "batch_norm_train": _batch_norm_case(True),
    "batch_norm_eval": _batch_norm_case(False),
    "layer_norm": _layer_norm_case,
}


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("primitive", sorted(PRIMITIVES))
def test_backward_matches_finite_differences(primitive, seed):
    rng = tc.make_rng(seed)
    inputs, forward, backward = PRIMITIVES[primitive](rng)
    weights = rng.standard_normal(forward(**inputs).shape)
    analytic = backward(weights, **inputs)
    assert set(analytic) == set(inputs)
    for name, value in inputs.items():
        def loss(v, name=name):
            return float(np.sum(forward(**{**inputs, name: v}) * weights))

        numeric = finite_diff_grad(loss, value, eps=1e-5)
        assert analytic[name].shape == value.shape, name
        assert relative_error(analytic[name], numeric).max() < 1e-6, name
