import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from gazedet import numerics as nx
from gazedet.boxes import Box, giou, giou_tensor, iou, pairwise_giou, pseudo_box, roi_scale, roi_scale_factor
from gazedet.errors import CapacityError, ConfigurationError, ContractError
from gazedet.gaze_pipeline import GazeRecord
from gazedet.matching import assignment_cost, hungarian_match, match_cost
from gazedet.numerics import Tensor


def boxes():
    return st.builds(lambda x0, y0, w, h: Box.from_xyxy(x0, y0, min(x0 + w, 1.0), min(y0 + h, 1.0)),
                     st.floats(0, 0.9), st.floats(0, 0.9), st.floats(0.02, 0.5), st.floats(0.02, 0.5))


def test_box_validation():
    with pytest.raises(ContractError):
        Box(0.5, 0.5, 0.0, 0.1)
    with pytest.raises(ContractError):
        Box(1.2, 0.5, 0.1, 0.1)


def test_iou_examples():
    a = Box(0.5, 0.5, 0.2, 0.2)
    assert iou(a, a) == 1.0
    assert iou(Box(0.2, 0.2, 0.1, 0.1), Box(0.8, 0.8, 0.1, 0.1)) == 0.0
    # corner boxes [1,1,2,2] vs [2,2,2,2] in x0,y0,w,h units: overlap 1, union 7
    assert iou([2.0, 2.0, 2.0, 2.0], [3.0, 3.0, 2.0, 2.0]) == pytest.approx(1 / 7)


def test_giou_examples():
    a = Box(0.5, 0.5, 0.3, 0.3)
    assert giou(a, a) == pytest.approx(1.0)
    assert giou(Box(0.25, 0.5, 0.5, 1.0), Box(0.75, 0.5, 0.5, 1.0)) == pytest.approx(0.0, abs=1e-15)
    assert giou(Box(0.001, 0.001, 0.002, 0.002), Box(0.999, 0.999, 0.002, 0.002)) < -0.99


@settings(max_examples=100, deadline=None)
@given(boxes(), boxes())
def test_iou_giou_properties(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0.0 <= iou(a, b) <= 1.0
    assert -1.0 <= giou(a, b) <= iou(a, b) + 1e-12
    np.testing.assert_allclose(pairwise_giou([a.as_list()], [b.as_list()])[0, 0], giou(a, b), atol=1e-12)


def test_giou_tensor_matches_scalar_and_gradient():
    rng = np.random.default_rng(0)
    pred = Tensor(np.column_stack([rng.uniform(0.3, 0.7, 4), rng.uniform(0.3, 0.7, 4),
                                   rng.uniform(0.1, 0.3, 4), rng.uniform(0.1, 0.3, 4)]), requires_grad=True)
    target = np.column_stack([rng.uniform(0.3, 0.7, 4), rng.uniform(0.3, 0.7, 4),
                              rng.uniform(0.1, 0.3, 4), rng.uniform(0.1, 0.3, 4)])
    g = giou_tensor(pred, target)
    for i in range(4):
        assert g.data[i] == pytest.approx(giou(list(pred.data[i]), list(target[i])), abs=1e-12)
    f = lambda t: giou_tensor(t, target).sum()
    nx.backward(f(pred))
    assert nx.relative_error(pred.grad, nx.finite_difference_grad(f, pred)) < 1e-4


def test_pseudo_box():
    assert pseudo_box(GazeRecord((0.5, 0.5))).as_list() == [0.5, 0.5, 0.25, 0.25]
    assert pseudo_box(GazeRecord((0.0, 0.0))).area() == pytest.approx(0.25 ** 2 / 4)
    assert pseudo_box(GazeRecord((0.5, 0.5)), 1.0).xyxy() == pytest.approx((0.0, 0.0, 1.0, 1.0))


def test_roi_scale_reference_and_best_triple():
    box = Box(0.5, 0.5, 0.2, 0.2)
    assert roi_scale(box, 0.4, 1.0, 1.0) == box
    assert roi_scale(box, 0.4, None, None) == box
    assert roi_scale_factor(1.0, 1.0, 1.0, (0.5, 0.3, 0.5)) == pytest.approx(1.3)
    with pytest.raises(ConfigurationError):
        roi_scale(box, 0.4, 0.5, 0.5, (0.0, 0.0, 0.0))


def test_roi_scale_monotone_and_clamped():
    box = Box(0.5, 0.5, 0.2, 0.2)
    widths = [roi_scale(box, 0.5, 1.0, d).w for d in np.linspace(1.0, 0.0, 41)]
    assert all(b >= a - 1e-15 for a, b in zip(widths, widths[1:]))
    assert max(widths) == pytest.approx(0.4)
    pw = [roi_scale(box, 0.5, p, 1.0).w for p in np.linspace(1.0, 0.0, 41)]
    assert all(b >= a - 1e-15 for a, b in zip(pw, pw[1:]))
    for p in np.linspace(0, 1, 11):
        for d in np.linspace(0, 1, 11):
            w = roi_scale(box, 0.3, p, d).w
            assert 0.1 - 1e-12 <= w <= 0.4 + 1e-12


def test_roi_scale_pupil_direct_flips_pupil_effect():
    box = Box(0.5, 0.5, 0.2, 0.2)
    assert roi_scale(box, 0.5, 0.5, 1.0).w > 0.2
    assert roi_scale(box, 0.5, 0.5, 1.0, pupil_direct=True).w < 0.2


def test_roi_scale_reclips_to_frame():
    out = roi_scale(Box(0.05, 0.5, 0.1, 0.1), 0.5, 1.0, 0.05)
    assert out.xyxy()[0] == 0.0


def test_hungarian_examples():
    q = hungarian_match([[1, 2], [2, 1]])
    assert q.tolist() == [0, 1]
    assert assignment_cost([[1, 2], [2, 1]], q) == 2
    assert hungarian_match([[4.0]]).tolist() == [0]
    with pytest.raises(CapacityError):
        hungarian_match(np.zeros((2, 3)))
    with pytest.raises(ContractError):
        hungarian_match([[np.inf, 1.0], [0.0, 1.0]])
    assert hungarian_match(np.zeros((3, 0))).size == 0


def _brute(cost):
    n_q, n_g = cost.shape
    return min(sum(cost[p[g], g] for g in range(n_g)) for p in itertools.permutations(range(n_q), n_g))


def test_hungarian_against_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n_g = int(rng.integers(1, 6))
        n_q = int(rng.integers(n_g, 7))
        cost = rng.normal(size=(n_q, n_g))
        q = hungarian_match(cost)
        assert len(set(q.tolist())) == n_g
        assert assignment_cost(cost, q) == pytest.approx(_brute(cost), abs=1e-12)


def test_hungarian_agrees_with_scipy_on_larger_matrices():
    rng = np.random.default_rng(8)
    for _ in range(30):
        cost = rng.random((20, 12))
        rows, cols = linear_sum_assignment(cost)
        assert assignment_cost(cost, hungarian_match(cost)) == pytest.approx(cost[rows, cols].sum())


def test_match_cost_examples():
    logits = np.array([[50.0, 0.0, 0.0, 0.0]])
    boxes = np.array([[0.5, 0.5, 0.2, 0.2]])
    c = match_cost(logits, boxes, [0], boxes)
    assert c[0, 0] == pytest.approx(-1.0 - 2.0)
    uni = match_cost(np.zeros((2, 4)), np.tile(boxes, (2, 1)), [1], boxes, w_l1=0, w_giou=0)
    np.testing.assert_allclose(uni, -0.25)
    rng = np.random.default_rng(0)
    lg, bx = rng.normal(size=(5, 4)), rng.uniform(0.2, 0.4, size=(5, 4))
    gt = rng.uniform(0.2, 0.4, size=(3, 4))
    base = match_cost(lg, bx, [0, 1, 2], gt)
    scaled = match_cost(lg, bx, [0, 1, 2], gt, 3.0, 15.0, 6.0)
    np.testing.assert_allclose(scaled, 3 * base)
    assert hungarian_match(base).tolist() == hungarian_match(scaled).tolist()
