import numpy as np
import pytest

from app.exceptions import ConfigError, SelectionError
from app.models.records import StageOutput
from app.services.selection import (
    PatchSelector,
    merge_neighbors,
    merge_neighbors_backward,
    score_map,
    select_patches,
    select_patches_backward,
)
from app.services.verify import reference_merge_neighbors, reference_topk


class TestMerge:
    def test_constant_grid(self):
        merged = merge_neighbors(np.full((1, 4, 4, 3), 2.0), 2)
        assert merged.shape == (1, 4, 3)
        np.testing.assert_array_equal(merged, 2.0)

    def test_single_block(self):
        grid = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1)
        np.testing.assert_array_equal(merge_neighbors(grid, 2), [[[2.5]]])

    def test_matches_loop_oracle(self, rng):
        grid = rng.standard_normal((1, 8, 8, 3))
        np.testing.assert_allclose(merge_neighbors(grid, 2)[0], reference_merge_neighbors(grid[0], 2), atol=1e-6)

    def test_merge_factor_four(self, rng):
        grid = rng.standard_normal((1, 8, 8, 2))
        np.testing.assert_allclose(merge_neighbors(grid, 4)[0], reference_merge_neighbors(grid[0], 4), atol=1e-12)

    def test_indivisible_grid(self):
        with pytest.raises(ConfigError):
            merge_neighbors(np.zeros((1, 6, 6, 1)), 4)

    def test_backward_spreads_evenly(self):
        grad = merge_neighbors_backward(np.ones((1, 1, 2)), (2, 2), 2)
        np.testing.assert_array_equal(grad, np.full((1, 2, 2, 2), 0.25))


class TestScoreAndSelect:
    def test_score_is_channel_mean(self):
        np.testing.assert_array_equal(score_map(np.array([[[1.0, 2.0, 3.0]]])), [[2.0]])

    def test_score_matches_loop(self, rng):
        merged = rng.standard_normal((2, 5, 4))
        expected = [[sum(merged[b, j]) / 4 for j in range(5)] for b in range(2)]
        np.testing.assert_allclose(score_map(merged), expected, atol=1e-12)

    def test_full_selection_is_sorted_permutation(self, rng):
        merged = rng.standard_normal((1, 6, 3))
        selected = select_patches(merged, score_map(merged), 6)
        assert sorted(selected.indices[0].tolist()) == list(range(6))
        assert np.all(np.diff(selected.scores[0][selected.indices[0]]) <= 0)

    def test_dominant_patch(self):
        merged = np.zeros((1, 5, 2))
        merged[0, 3] = 10.0
        assert select_patches(merged, score_map(merged), 1).indices.tolist() == [[3]]

    def test_gather_is_exact(self, rng):
        merged = rng.standard_normal((2, 9, 4))
        selected = select_patches(merged, score_map(merged), 4)
        for b in range(2):
            assert selected.indices[b].tolist() == reference_topk(score_map(merged)[b], 4)
            np.testing.assert_array_equal(selected.patches[b], merged[b, selected.indices[b]])

    def test_k_too_large_names_stage(self):
        merged = np.zeros((1, 4, 2))
        with pytest.raises(SelectionError, match="stage 3"):
            select_patches(merged, score_map(merged), 5, stage=3)

    def test_unselected_rows_get_zero_gradient(self, rng):
        merged = rng.standard_normal((2, 8, 3))
        selected = select_patches(merged, score_map(merged), 3)
        grad = select_patches_backward(rng.standard_normal((2, 3, 3)), selected)
        for b in range(2):
            rest = np.setdiff1d(np.arange(8), selected.indices[b])
            assert not grad[b, rest].any()

    @pytest.mark.parametrize("scale", [0.25, 2.0, 3.7, 1024.0])
    def test_positive_scaling_keeps_the_selection(self, rng, scale):
        merged = rng.standard_normal((3, 16, 5))
        before = select_patches(merged, score_map(merged), 6)
        scaled = scale * merged
        after = select_patches(scaled, score_map(scaled), 6)
        np.testing.assert_allclose(after.scores, scale * before.scores, rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(after.indices, before.indices)

    def test_selected_scores_dominate_unselected(self, rng):
        for _ in range(20):
            merged = np.round(rng.standard_normal((1, 12, 3)), 1)
            scores = score_map(merged)
            chosen = select_patches(merged, scores, 5).indices[0]
            rest = np.setdiff1d(np.arange(12), chosen)
            assert scores[0, chosen].min() >= scores[0, rest].max()

    def test_ties_resolve_to_lower_index(self):
        values = np.array([1.0, 3.0, 3.0, 2.0, 3.0, 0.0])
        merged = np.repeat(values[None, :, None], 4, axis=2)
        scores = score_map(merged)
        assert select_patches(merged, scores, 2).indices.tolist() == [[1, 2]]
        assert select_patches(merged, scores, 3).indices.tolist() == [[1, 2, 4]]
        assert select_patches(merged, scores, 4).indices.tolist() == [[1, 2, 4, 3]]

    def test_raising_one_patch_never_evicts_a_higher_patch(self, rng):
        for _ in range(20):
            merged = rng.standard_normal((1, 10, 4))
            before = set(select_patches(merged, score_map(merged), 4).indices[0].tolist())
            j, delta = int(rng.integers(10)), float(rng.uniform(0.1, 2.0))
            raised = merged.copy()
            raised[0, j] += delta
            scores = score_map(raised)
            np.testing.assert_allclose(scores[0, j], score_map(merged)[0, j] + delta, rtol=1e-12, atol=1e-12)
            after = set(select_patches(raised, scores, 4).indices[0].tolist())
            assert j in after or j not in before
            for i in before - {j}:
                if scores[0, i] > scores[0, j]:
                    assert i in after


def test_selector_uses_config(micro, rng):
    features = rng.standard_normal((2, 16, 16, 8))
    selected = PatchSelector(micro).select(StageOutput(features, np.zeros((2, 8))), 1)
    assert selected.k == micro.k_schedule[0]
    assert selected.merged_count == 64
    assert selected.grid_shape == (16, 16)
    grad = PatchSelector(micro).backward(np.ones_like(selected.patches), selected)
    assert grad.shape == features.shape
    np.testing.assert_allclose(grad.sum(), selected.patches.size)
