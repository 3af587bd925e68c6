import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tevit.core.gradcheck import finite_diff_check
from tevit.core.tensor import Tensor
from tevit.head import PredictionSet
from tevit.losses import (CostWeights, GroundTruth, cost_matrix, dice_loss, focal_loss, giou, giou_loss,
                          l1_box_loss, total_loss)
from tevit.matching import hungarian

ORACLE_TOL = 1e-9


# -- focal --------------------------------------------------------------------

def test_focal_positive_half():
    assert focal_loss(0.5, 1) == pytest.approx(0.25 * 0.25 * math.log(2), abs=ORACLE_TOL)
    assert focal_loss(0.5, 1) == pytest.approx(0.043322, abs=1e-6)


def test_focal_negative_half():
    assert focal_loss(0.5, 0) == pytest.approx(0.75 * 0.25 * math.log(2), abs=ORACLE_TOL)
    assert focal_loss(0.5, 0) == pytest.approx(0.129966, abs=1e-6)


def test_focal_confident_positive_vanishes():
    assert focal_loss(1 - 1e-9, 1) < 1e-12


def test_focal_clamps_endpoints():
    assert np.isfinite(focal_loss(np.array([0.0, 1.0]), np.array([1, 0]))).all()


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.sampled_from([0, 1]))
def test_focal_matches_formula(p, y):
    expect = -0.25 * (1 - p) ** 2 * math.log(p) if y else -0.75 * p ** 2 * math.log(1 - p)
    assert focal_loss(p, y) == pytest.approx(expect, abs=ORACLE_TOL)
    assert focal_loss(p, y) >= 0


def test_focal_tensor_agrees_with_array():
    p = np.random.default_rng(0).uniform(0.01, 0.99, size=(3, 4))
    y = (np.random.default_rng(1).uniform(size=(3, 4)) > 0.5).astype(float)
    np.testing.assert_allclose(focal_loss(Tensor(p), y).data, focal_loss(p, y), atol=1e-15)


# -- boxes --------------------------------------------------------------------

def test_giou_identical():
    assert giou([1, 2, 5, 7], [1, 2, 5, 7]) == pytest.approx(1.0, abs=ORACLE_TOL)
    assert giou_loss([1, 2, 5, 7], [1, 2, 5, 7]) == pytest.approx(0.0, abs=ORACLE_TOL)


def test_giou_disjoint_corner():
    assert giou([0, 0, 1, 1], [1, 1, 2, 2]) == pytest.approx(-0.5, abs=ORACLE_TOL)


def test_giou_nested():
    assert giou([0, 0, 2, 2], [1, 1, 2, 2]) == pytest.approx(0.25, abs=ORACLE_TOL)


def test_giou_zero_area_box():
    # zero-area box: IoU term 0, enclosing box [0,0,2,2] with union 1
    assert giou([0, 0, 1, 1], [2, 2, 2, 2]) == pytest.approx(0 - (4 - 1) / 4, abs=ORACLE_TOL)


def test_giou_tensor_agrees():
    a = np.array([[0.0, 0, 2, 2], [0, 0, 1, 1]])
    b = np.array([[1.0, 1, 2, 2], [1, 1, 2, 2]])
    np.testing.assert_allclose(giou(Tensor(a), Tensor(b)).data, [0.25, -0.5], atol=ORACLE_TOL)


boxes = st.tuples(st.floats(0, 10), st.floats(0, 10), st.floats(0.1, 10), st.floats(0.1, 10)).map(
    lambda t: [t[0], t[1], t[0] + t[2], t[1] + t[3]])


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_giou_range_and_symmetry(a, b):
    g = giou(a, b)
    assert -1 - 1e-12 <= g <= 1 + 1e-12
    assert g == pytest.approx(giou(b, a), abs=1e-12)


def test_l1_examples():
    a = np.array([0.5, 0.5, 0.2, 0.2])
    b = np.array([0.5, 0.5, 0.4, 0.2])
    assert l1_box_loss(a, a) == 0
    assert l1_box_loss(a, b) == pytest.approx(0.05, abs=ORACLE_TOL)
    assert l1_box_loss(a, b) == l1_box_loss(b, a)


# -- dice ---------------------------------------------------------------------

def test_dice_identical_binary():
    g = np.zeros(10)
    g[2:7] = 1
    assert dice_loss(g, g) == pytest.approx(0.0, abs=ORACLE_TOL)
    assert dice_loss(g, g, eps=0.0) == pytest.approx(0.0, abs=ORACLE_TOL)


def test_dice_disjoint():
    p = np.zeros(10)
    g = np.zeros(10)
    p[:3] = 1
    g[5:8] = 1
    assert dice_loss(p, g, eps=0.0) == pytest.approx(1.0, abs=ORACLE_TOL)
    assert dice_loss(p, g, eps=1e-12) == pytest.approx(1.0, abs=1e-9)


def test_dice_hand_example():
    p = np.zeros(8)
    g = np.zeros(8)
    p[1:5] = 1
    g[3:7] = 1
    assert dice_loss(p, g, eps=0.0) == pytest.approx(0.5, abs=ORACLE_TOL)
    assert dice_loss(p, g) == pytest.approx(1 - 5 / 9, abs=ORACLE_TOL)


def test_dice_empty_masks_guarded():
    assert dice_loss(np.zeros(5), np.zeros(5)) == pytest.approx(0.0)


# -- matching cost and total loss ----------------------------------------------

IMG = (8, 8)


def _gt(t=2):
    masks = np.zeros((t, 2, 8, 8), dtype=bool)
    masks[:, 0, 1:4, 1:5] = True
    masks[:, 1, 4:8, 3:8] = True
    bx = np.tile(np.array([[1.0, 1, 5, 4], [3, 4, 8, 8]]), (t, 1, 1))
    return GroundTruth(np.array([2, 0]), bx, masks, np.ones((t, 2), dtype=bool))


def _perfect(gt, nq=4, extra_seed=0):
    """Queries 1 and 3 reproduce GT 0 and 1; the others are random and confident of nothing."""
    rng = np.random.default_rng(extra_seed)
    t = gt.num_frames
    logits = np.full((t, nq, 3), -30.0)
    logits[:, 1, gt.categories[0]] = 30.0
    logits[:, 3, gt.categories[1]] = 30.0
    bx = np.zeros((t, nq, 4))
    for i in range(nq):
        x1, y1 = rng.uniform(0, 4, size=2)
        bx[:, i] = [x1, y1, x1 + rng.uniform(1, 4), y1 + rng.uniform(1, 4)]
    bx[:, 1] = gt.boxes[:, 0]
    bx[:, 3] = gt.boxes[:, 1]
    masks = rng.normal(size=(t, nq, 8, 8))
    masks[:, 1] = np.where(gt.masks[:, 0], 30.0, -30.0)
    masks[:, 3] = np.where(gt.masks[:, 1], 30.0, -30.0)
    return PredictionSet(Tensor(logits), Tensor(bx), Tensor(masks), 1)


def test_cost_matrix_zero_weights():
    w = CostWeights(0.0, 0.0, 0.0)
    c = cost_matrix(_perfect(_gt()), _gt(), w, IMG)
    assert c.shape == (4, 2) and not c.any()


def test_cost_matrix_empty_gt():
    gt = _gt()
    empty = gt.select(np.array([], dtype=np.int64))
    c = cost_matrix(_perfect(gt), empty, CostWeights(), IMG)
    assert c.shape == (4, 0)
    asg = hungarian(c)
    assert len(asg) == 0 and asg.unmatched_rows == [0, 1, 2, 3]


@pytest.mark.parametrize("seed", range(20))
def test_exact_prediction_dominates_column(seed):
    gt = _gt()
    c = cost_matrix(_perfect(gt, nq=6, extra_seed=seed), gt, CostWeights(), IMG)
    assert np.isfinite(c).all() and (c >= 0).all()
    assert np.argmin(c[:, 0]) == 1 and np.argmin(c[:, 1]) == 3
    assert all(c[1, 0] < c[i, 0] for i in range(6) if i != 1)


def test_cost_matrix_column_swap():
    gt = _gt()
    pred = _perfect(gt)
    swapped = gt.select(np.array([1, 0]))
    np.testing.assert_allclose(cost_matrix(pred, swapped, CostWeights(), IMG),
                               cost_matrix(pred, gt, CostWeights(), IMG)[:, ::-1], atol=1e-15)


def test_perfect_predictions_near_zero_loss():
    gt = _gt()
    loss, parts, asg = total_loss([_perfect(gt)], gt, CostWeights(), IMG)
    assert sorted(asg[0].pairs) == [(1, 0), (3, 1)]
    assert loss.item() < 1e-9
    assert all(v >= 0 for v in parts.values())


def test_doubling_l1_weight_doubles_l1_term():
    gt = _gt()
    pred = _perfect(gt, extra_seed=3)
    pred.boxes.data[:, 1] += 0.5
    w = CostWeights()
    _, a, asg = total_loss([pred], gt, w, IMG)
    _, b, _ = total_loss([pred], gt, replace(w, lambda_L1=2 * w.lambda_L1), IMG, asg)
    assert b["L1"] == pytest.approx(2 * a["L1"], rel=1e-14)
    for k in ("cls", "giou", "dice"):
        assert b[k] == a[k]


def test_absent_frames_are_negative_labels():
    gt = _gt(3)
    gt.visible[1, 0] = False
    pred = _perfect(gt)
    _, parts, _ = total_loss([pred], gt, CostWeights(), IMG)
    # query 1 is confident on every frame, including the one where its GT is absent
    assert parts["cls"] > 1.0


def test_total_loss_gradient():
    gt = _gt()
    rng = np.random.default_rng(7)
    pred = PredictionSet(Tensor(rng.normal(size=(2, 4, 3))),
                         Tensor(np.tile([[0.5, 0.4, 5.0, 6.0]], (2, 4, 1)) + rng.uniform(0, 1, size=(2, 4, 4))),
                         Tensor(rng.normal(size=(2, 4, 4, 4))), 2)
    _, _, asg = total_loss([pred], gt, CostWeights(), IMG)
    for x in (pred.logits, pred.boxes, pred.mask_logits):
        err = finite_diff_check(lambda: total_loss([pred], gt, CostWeights(), IMG, asg)[0], x, pass_x=False)
        assert err < 1e-4
