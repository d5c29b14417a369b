import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazedet import numerics as nx
from gazedet.attention import (AttentionConfig, apply_gaze_bias, base_attention_logits, gaze_bias,
                               init_attention_weights, mha_forward, patch_centers)
from gazedet.errors import ConfigurationError, ContractError, DimensionError
from gazedet.gaze_pipeline import GazeRecord
from gazedet.numerics import Tensor


def test_patch_centers():
    assert patch_centers(1, 1).centers.tolist() == [[0.5, 0.5]]
    np.testing.assert_allclose(patch_centers(2, 2).centers,
                               [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])
    g = patch_centers(8, 8)
    assert g.n_patches == 64 and np.all((g.centers > 0) & (g.centers < 1))


def test_attention_config_validation():
    with pytest.raises(ConfigurationError):
        AttentionConfig(3, 32)
    with pytest.raises(ConfigurationError):
        AttentionConfig(4, 32, alpha=-0.1)
    assert AttentionConfig(4, 32).d_k == 8


def test_base_logits():
    L = 4
    np.testing.assert_allclose(base_attention_logits(np.eye(L), np.eye(L)).data, np.eye(L) / math.sqrt(L))
    assert np.all(base_attention_logits(np.zeros((3, 2)), np.ones((3, 2))).data == 0)
    rng = np.random.default_rng(0)
    Q, K = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    loop = np.array([[sum(Q[i, t] * K[j, t] for t in range(2)) / math.sqrt(2) for j in range(3)] for i in range(3)])
    np.testing.assert_allclose(base_attention_logits(Q, K).data, loop, atol=1e-15)
    with pytest.raises(DimensionError):
        base_attention_logits(np.ones((3, 2)), np.ones((3, 3)))


def test_gaze_bias_examples():
    grid = patch_centers(2, 2)
    rec = GazeRecord((0.25, 0.25), g_hat=(0.0, 0.0, 1.0))
    assert gaze_bias(rec, grid)[0] == 1.0
    # single-patch grid whose centre is offset from the gaze: g=(0,0), c=(1,0), g2d=(1,0)
    class OneCell:
        centers = np.array([[1.0, 0.0]])
    b = gaze_bias(GazeRecord((0.0, 0.0), g_hat=(1.0, 0.0, 0.0)), OneCell)
    assert b[0] == pytest.approx(1.0)


def test_gaze_bias_invalid_record():
    with pytest.raises(ContractError):
        gaze_bias(GazeRecord((0.5, 0.5), valid=False), patch_centers(2, 2))


def test_gaze_bias_without_direction_is_proximity():
    grid = patch_centers(4, 4)
    rec = GazeRecord((0.3, 0.6))
    dist2 = ((grid.centers - [0.3, 0.6]) ** 2).sum(axis=1)
    np.testing.assert_allclose(gaze_bias(rec, grid), 1 / (1 + dist2))
    np.testing.assert_allclose(gaze_bias(GazeRecord((0.3, 0.6), g_hat=(0.0, 1.0, 0.0)), grid, use_direction=False),
                               1 / (1 + dist2))


class _Points:
    def __init__(self, pts):
        self.centers = np.asarray(pts, dtype=np.float64)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi))
def test_bias_range_and_radial_monotonicity(gx, gy, ray_angle, dir_angle):
    g_hat = (math.cos(dir_angle) * 0.6, math.sin(dir_angle) * 0.6, 0.8)
    rec = GazeRecord((gx, gy), g_hat=tuple(np.array(g_hat) / np.linalg.norm(g_hat)))
    radii = np.linspace(0.0, 1.5, 200)
    pts = np.stack([gx + radii * math.cos(ray_angle), gy + radii * math.sin(ray_angle)], axis=1)
    b = gaze_bias(rec, _Points(pts))
    assert np.all(b > 0) and np.all(b <= 2)
    assert b[0] == 1.0
    # along a fixed ray (excluding the singular origin) the direction factor is constant
    assert np.all(np.diff(b[1:]) < 0)


def test_apply_gaze_bias():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(5, 5)))
    assert apply_gaze_bias(logits, np.ones(5), 0.0).data.tobytes() == logits.data.tobytes()
    w0 = nx.softmax_rows(logits).data
    w1 = nx.softmax_rows(apply_gaze_bias(logits, np.full(5, 3.0), 0.7)).data
    np.testing.assert_allclose(w0, w1, atol=1e-15)
    bias = np.zeros(5)
    bias[2] = 1.0
    w2 = nx.softmax_rows(apply_gaze_bias(logits, bias, 0.7)).data
    assert np.all(w2[:, 2] > w0[:, 2])
    with pytest.raises(DimensionError):
        apply_gaze_bias(logits, np.ones(4), 0.7)


def test_bias_additivity():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(6, 6))
    bias = rng.random(6)
    out = apply_gaze_bias(logits, bias, 0.7).data
    for j in range(6):
        for k in range(6):
            np.testing.assert_allclose(out[:, j] - out[:, k], logits[:, j] - logits[:, k] + 0.7 * (bias[j] - bias[k]),
                                       atol=1e-12)


def _layer(alpha=0.7, L=16, d=8, heads=2, seed=0):
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(heads, d, alpha)
    return cfg, init_attention_weights(cfg, rng), Tensor(rng.normal(size=(L, d)))


def test_mha_absent_record_equals_zero_alpha():
    cfg, w, X = _layer()
    rec = GazeRecord((0.2, 0.8), g_hat=(0.6, 0.0, 0.8))
    y_none, _ = mha_forward(X, w, None, cfg)
    y_zero, _ = mha_forward(X, w, rec, AttentionConfig(cfg.n_heads, cfg.d_model, 0.0))
    assert y_none.data.tobytes() == y_zero.data.tobytes()


def test_mha_rows_stochastic_and_shapes():
    cfg, w, X = _layer()
    y, maps = mha_forward(X, w, GazeRecord((0.5, 0.5)), cfg)
    assert y.shape == (16, 8)
    assert maps.weights.shape == (2, 16, 16) and maps.logits.shape == (2, 16, 16)
    assert np.max(np.abs(maps.weights.sum(-1) - 1)) < 1e-9
    with pytest.raises(DimensionError):
        mha_forward(Tensor(np.ones((16, 6))), w, None, cfg)


def test_mha_gradient_matches_finite_differences():
    cfg, w, X = _layer(L=9, d=4, heads=2, seed=3)
    X.requires_grad = True
    rec = GazeRecord((0.3, 0.4), g_hat=(0.6, 0.0, 0.8))
    target = np.random.default_rng(9).normal(size=(9, 4))
    f = lambda _: ((mha_forward(X, w, rec, cfg)[0] - target) ** 2).mean()
    nx.backward(f(None))
    for name, t in list(w.items()) + [("X", X)]:
        assert nx.relative_error(t.grad, nx.finite_difference_grad(f, t)) < 1e-4, name


def test_attention_near_gaze_monotone_in_alpha():
    cfg, w, X = _layer(L=64, d=8, heads=2, seed=5)
    rec = GazeRecord((0.4, 0.6), g_hat=(0.0, 0.6, 0.8))
    grid = patch_centers(8, 8)
    near = np.hypot(*(grid.centers - rec.g_xy).T) <= 0.2
    masses = []
    for a in (0.0, 0.1, 0.2, 0.5, 0.7, 1.0, 2.0):
        _, maps = mha_forward(X, w, rec, AttentionConfig(2, 8, a), grid)
        masses.append(maps.weights[..., near].sum(-1).mean())
    assert all(b >= a for a, b in zip(masses, masses[1:]))
