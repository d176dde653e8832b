from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from impact.model import ModelConfig, init_model
from impact.pruning import (
    PruneMask,
    apply_mask,
    apply_row_prune,
    collect_activation_norms,
    input_feature_norms,
    magnitude_prune,
    prune,
    prune_count,
    row_mask,
    wanda_prune,
    wanda_scores,
    weight_sparsity,
)

SMALL = ModelConfig(image_size=8, patch_size=4, embed_dim=16, depth=2, heads=2, mlp_ratio=2, num_classes=3,
                    layerscale_init=0.5)


def test_zero_calibration_gives_zero_patch_norms():
    m = init_model(SMALL)
    norms = collect_activation_norms(m, np.zeros((4, 1, 8, 8), np.float32))
    np.testing.assert_array_equal(norms["patch_embed.weight"], 0.0)
    assert set(norms) == {"patch_embed.weight", *m.prunable_names()}
    with pytest.raises(ValueError):
        collect_activation_norms(m, np.zeros((0, 1, 8, 8), np.float32))


def test_input_feature_norm_examples():
    np.testing.assert_allclose(input_feature_norms(np.array([[3.0, 4.0]])), [3.0, 4.0])
    np.testing.assert_allclose(input_feature_norms(np.array([[1.0, 0.0], [0.0, 2.0]])), [1.0, 2.0])


def test_norms_pool_over_batches():
    m = init_model(SMALL)
    x = np.random.default_rng(0).random((10, 1, 8, 8), dtype=np.float32)
    a = collect_activation_norms(m, x, batch_size=3)
    b = collect_activation_norms(m, x, batch_size=10)
    for k in a:
        np.testing.assert_allclose(a[k], b[k], rtol=1e-6)


def test_wanda_score_example():
    S = wanda_scores(np.array([[1.0, -0.5], [0.2, 0.3]]), np.array([1.0, 4.0]))
    np.testing.assert_allclose(S, [[1.0, 2.0], [0.2, 1.2]])
    np.testing.assert_array_equal(wanda_scores(np.array([[5.0, -1.0]]), np.zeros(2)), 0.0)
    W = np.array([[1.0, -3.0], [0.5, 0.0]])
    np.testing.assert_array_equal(wanda_scores(W, np.ones(2)), np.abs(W))
    with pytest.raises(ValueError):
        wanda_scores(W, np.ones(3))


def test_row_mask_examples():
    np.testing.assert_array_equal(row_mask(np.array([[1.0, 2.0]]), 0.5), [[False, True]])
    np.testing.assert_array_equal(row_mask(np.array([[1.0, 2.0]]), 0.0), [[True, True]])
    np.testing.assert_array_equal(row_mask(np.array([[2.0, 2.0]]), 0.5), [[False, True]])
    np.testing.assert_array_equal(row_mask(np.abs(np.array([[0.1, -5.0]])), 0.5), [[False, True]])
    assert row_mask(np.arange(10.0)[None], 0.9).sum() == 1
    assert prune_count(0.7, 10) == 7 and prune_count(0.9, 10) == 9
    with pytest.raises(ValueError):
        row_mask(np.ones((1, 2)), 1.0)
    with pytest.raises(ValueError):
        row_mask(np.ones((1, 2)), -0.1)


def _brute_row_mask(scores: np.ndarray, ratio: float) -> np.ndarray:
    k = int(np.floor(ratio * scores.shape[1] + 1e-9))
    mask = np.ones(scores.shape, bool)
    for r, row in enumerate(scores):
        ranked = sorted(range(len(row)), key=lambda j: (row[j], j))
        for j in ranked[:k]:
            mask[r, j] = False
    return mask


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)),
              elements=st.sampled_from([0.0, 0.5, 1.0, 2.0, 3.5])),
       st.sampled_from([0.0, 0.1, 0.25, 0.3, 0.5, 0.7, 0.9]))
def test_row_mask_matches_brute_force(scores, ratio):
    m = row_mask(scores, ratio)
    np.testing.assert_array_equal(m, _brute_row_mask(scores, ratio))
    assert np.all((~m).sum(axis=1) == prune_count(ratio, scores.shape[1]))


def test_wanda_unit_norms_equals_magnitude():
    m = init_model(SMALL)
    ones = {k: np.ones(m.params[k].shape[1]) for k in m.prunable_names()}
    for ratio in (0.1, 0.5, 0.7, 0.9):
        a, b = wanda_prune(m, ratio, norms=ones), magnitude_prune(m, ratio)
        for k in a.masks:
            np.testing.assert_array_equal(a.masks[k], b.masks[k])


def test_prune_zeroes_weights_and_reports_sparsity():
    m = init_model(SMALL)
    calib = np.random.default_rng(0).random((6, 1, 8, 8), dtype=np.float32)
    p = prune(m, 0.5, "wanda", calibration=calib)
    for k, s in weight_sparsity(p).items():
        assert s == 0.5
        assert np.all(p.params[k][~p.prune_mask[k]] == 0)
    assert p.meta["sparsity"] == 0.5
    untouched = set(m.params) - set(m.prunable_names())
    assert all(p.params[k].tobytes() == m.params[k].tobytes() for k in untouched)
    with pytest.raises(ValueError):
        wanda_prune(m, 0.5)
    with pytest.raises(ValueError):
        apply_row_prune({}, 0.5, "random")


def test_apply_mask_shape_check():
    m = init_model(SMALL)
    k = m.prunable_names()[0]
    with pytest.raises(ValueError):
        apply_mask(m, PruneMask({k: np.ones((1, 1), bool)}, 0.5, "magnitude"))


def test_overall_sparsity():
    pm = PruneMask({"a": np.array([[True, False]]), "b": np.array([[True, True, False, False]])}, 0.5, "magnitude")
    assert pm.overall_sparsity() == pytest.approx(0.5)
    assert pm.sparsity() == {"a": 0.5, "b": 0.5}
