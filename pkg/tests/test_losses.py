import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from omniscene import ContractViolation
from omniscene.losses import (LossWeights, assignment_cost, binary_focal_loss, depth_loss, focal_loss,
                              hungarian_match, l1_box_loss, motion_loss, planning_loss, set_loss, total_loss,
                              winner_take_all)
from omniscene.numeric import Tensor, backward, finite_difference_grad, softmax, tsum

from _oracles import brute_force_assignment, hungarian_agrees
from _toy import relative_error


# matching --------------------------------------------------------------------

def test_hungarian_examples():
    assert hungarian_match([[4.0]]) == [0]
    cost = [[1.0, 10.0], [10.0, 1.0]]
    assert hungarian_match(cost) == [0, 1]
    assert assignment_cost(cost, [0, 1]) == 2.0
    assert hungarian_match([[5.0, 1.0, 3.0]]) == [1]
    assert hungarian_match(np.zeros((0, 3))) == []


def test_hungarian_matches_permutations_for_every_shape():
    assert all(hungarian_agrees(seed) for seed in range(20))


def test_hungarian_rectangular_by_hand():
    cost = np.array([[2.0, 9.0, 1.0, 7.0], [3.0, 2.0, 1.0, 8.0]])
    match = hungarian_match(cost)
    assert assignment_cost(cost, match) == brute_force_assignment(cost) == 3.0


def test_hungarian_errors():
    with pytest.raises(ContractViolation):
        hungarian_match(np.zeros((3, 2)))
    with pytest.raises(ContractViolation):
        hungarian_match([[np.inf]])
    with pytest.raises(ContractViolation):
        hungarian_match(np.zeros(3))


# focal -----------------------------------------------------------------------

def test_focal_examples():
    assert focal_loss([0.0, 1.0], 1).item() == 0.0
    assert abs(focal_loss([0.5, 0.5], 0).item() - 0.25 * 0.25 * math.log(2)) < 1e-12
    p = [0.2, 0.7, 0.1]
    assert focal_loss(p, 1, alpha=1.0, gamma=0.0).item() == pytest.approx(-math.log(0.7), abs=1e-15)


def test_focal_averages_rows():
    P = np.array([[0.5, 0.5], [0.9, 0.1]])
    expected = (focal_loss(P[0], 1).item() + focal_loss(P[1], 0).item()) / 2
    assert focal_loss(P, [1, 0]).item() == pytest.approx(expected, abs=1e-15)


def test_focal_errors():
    with pytest.raises(ContractViolation):
        focal_loss([0.5, 0.6], 0)
    with pytest.raises(ContractViolation):
        focal_loss([1.2, -0.2], 0)
    with pytest.raises(ContractViolation):
        focal_loss([0.5, 0.5], 2)
    with pytest.raises(ContractViolation):
        focal_loss([0.5, 0.5], 0, alpha=1.5)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.98), st.floats(0.001, 0.01), st.floats(0.0, 4.0))
def test_focal_nonnegative_and_strictly_decreasing(p, dp, gamma):
    lo = focal_loss([1 - p, p], 1, gamma=gamma).item()
    hi = focal_loss([1 - p - dp, p + dp], 1, gamma=gamma).item()
    assert lo >= 0 and hi >= 0
    assert hi < lo


def test_binary_focal_matches_two_class_form():
    s = np.array([0.3, 0.8])
    manual = focal_loss(np.stack([1 - s, s], -1), [0, 1]).item()
    assert binary_focal_loss(s, [0, 1]).item() == pytest.approx(manual, abs=1e-15)


# L1 and depth ----------------------------------------------------------------

def test_l1_examples():
    gt = np.arange(7, dtype=float)
    assert l1_box_loss(gt, gt).item() == 0.0
    one = gt.copy()
    one[3] += 1
    assert l1_box_loss(one, gt).item() == pytest.approx(1 / 7, abs=1e-15)
    two = gt.copy()
    two[0] -= 1
    two[6] += 2
    assert l1_box_loss(two, gt).item() == pytest.approx(3 / 7, abs=1e-15)
    with pytest.raises(ContractViolation):
        l1_box_loss(np.zeros(7), np.zeros(6))


def test_depth_examples():
    assert depth_loss([4.0, 5.0], [4.0, 5.0]).item() == 0.0
    assert depth_loss(3.0, 1.0).item() == 2.0
    assert depth_loss([1.0, 6.0], [2.0, 3.0], weight=0.5).item() == 1.0


# winner take all -------------------------------------------------------------

def test_wta_perfect_mode_dominant_logit():
    gt = np.array([[1.0, 0.0], [2.0, 0.0]])
    modes = np.array([gt, gt + 3.0])
    wta = winner_take_all(modes, [60.0, 0.0], gt)
    assert wta.regression.item() == 0.0 and wta.classification.item() < 1e-20
    assert wta.winners.tolist() == [0]


@pytest.mark.parametrize("logits", [[0.0, 0.0], [9.0, -9.0], [-3.0, 3.0]])
def test_wta_label_ignores_logits(logits):
    gt = np.array([[0.0, 1.0], [0.0, 2.0]])
    modes = np.array([gt + 1.0, gt])
    assert winner_take_all(modes, logits, gt).winners.tolist() == [1]


def test_wta_three_mode_hand_case():
    # per-mode ADE: 2, 0.5, 1 -> winner 1; its L1 error is |0.5| on one coordinate of four
    gt = np.zeros((2, 2))
    modes = np.array([[[2.0, 0.0], [2.0, 0.0]], [[0.0, 0.5], [0.0, 0.5]], [[1.0, 0.0], [0.0, 1.0]]])
    logits = np.array([0.0, math.log(2.0), 0.0])
    wta = winner_take_all(modes, logits, gt)
    assert wta.winners.tolist() == [1]
    assert wta.regression.item() == pytest.approx(0.25, abs=1e-15)
    # softmax gives p = 0.5 for the winner
    assert wta.classification.item() == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-15)
    assert motion_loss(modes, logits, gt, LossWeights()).item() == pytest.approx(0.25 + 0.25 * 0.25 * math.log(2))


def test_wta_horizon_mismatch():
    with pytest.raises(ContractViolation):
        winner_take_all(np.zeros((2, 3, 2)), [0.0, 0.0], np.zeros((4, 2)))
    with pytest.raises(ContractViolation):
        winner_take_all(np.zeros((2, 3, 2)), [0.0, 0.0, 0.0], np.zeros((3, 2)))


def test_planning_loss_examples():
    gt = np.array([[1.0, 0.0], [2.0, 0.0]])
    modes = np.array([gt, gt + 5])
    perfect = planning_loss(modes, [60.0, 0.0], gt, [3.0, 0.1], [3.0, 0.1], LossWeights())
    assert perfect.item() < 1e-20
    status_only = LossWeights(plan_r=0.0, plan_c=0.0)
    assert planning_loss(modes, [0.0, 0.0], gt, [4.0, 0.1], [3.0, 0.1], status_only).item() == 0.5
    zero = LossWeights(plan_r=0.0, plan_c=0.0, plan_status=0.0)
    assert planning_loss(modes + 7, [1.0, -1.0], gt, [9.0, 9.0], [0.0, 0.0], zero).item() == 0.0


def test_loss_weights_validation():
    with pytest.raises(ContractViolation):
        LossWeights(depth=-1.0)
    with pytest.raises(ContractViolation):
        LossWeights(det_c=float("nan"))


# set loss and total ----------------------------------------------------------

def test_set_loss_perfect_prediction_matches_and_is_small():
    gt_params = np.array([[1.0, 2.0, 3.0], [-4.0, 0.0, 1.0]])
    params = np.array([[9.0, 9.0, 9.0], [-4.0, 0.0, 1.0], [1.0, 2.0, 3.0]])
    scores = np.array([1e-9, 1 - 1e-9, 1 - 1e-9])
    logits = np.array([[0.0, 0.0], [-40.0, 40.0], [40.0, -40.0]])
    loss, match = set_loss(scores, logits, params, [0, 1], gt_params, 1.0, 1.0)
    assert match == [2, 1]
    assert loss.item() < 1e-15


def test_set_loss_without_ground_truth_pushes_scores_down():
    loss, match = set_loss([0.5, 0.2], np.zeros((2, 3)), np.zeros((2, 4)), [], np.zeros((0, 4)), 2.0, 1.0)
    assert match == []
    expected = 2.0 * binary_focal_loss([0.5, 0.2], [0, 0]).item()
    assert loss.item() == pytest.approx(expected, abs=1e-15)


def test_set_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    s0 = rng.uniform(0.2, 0.8, 4)
    logits0 = rng.normal(size=(4, 3))
    params0 = rng.normal(size=(4, 5))
    gt_cls, gt_params = np.array([2, 0]), params0[[1, 3]] + rng.uniform(0.5, 1.0, (2, 5))

    def loss(s, lg, pr):
        return set_loss(s, lg, pr, gt_cls, gt_params, 1.0, 1.0)[0]

    leaves = [Tensor(a, requires_grad=True) for a in (s0, logits0, params0)]
    backward(loss(*leaves))
    for k, leaf in enumerate(leaves):
        def f(t, k=k):
            args = [Tensor(a) for a in (s0, logits0, params0)]
            args[k] = t
            return loss(*args)
        fd = finite_difference_grad(f, Tensor(leaf.data.copy())).data
        assert relative_error(leaf.grad, fd) < 1e-5


def test_total_loss_examples():
    assert total_loss(0.0, 0.0, 0.0, 0.0, 0.0).item() == 0.0
    assert total_loss(*map(Tensor, (1.0, 2.0, 3.0, 4.0, 5.0))).item() == 15.0


def test_total_loss_gradient_is_sum_of_parts():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=4)
    w = rng.normal(size=(5, 4))

    def parts(x):
        return [tsum(softmax(x * float(k + 1)) * w[k]) for k in range(5)]

    x = Tensor(x0, requires_grad=True)
    backward(total_loss(*parts(x)))
    total_grad = x.grad.copy()
    summed = np.zeros(4)
    for k in range(5):
        xk = Tensor(x0, requires_grad=True)
        backward(parts(xk)[k])
        summed += xk.grad
    np.testing.assert_allclose(total_grad, summed, atol=1e-14)
    fd = finite_difference_grad(lambda t: total_loss(*parts(t)), Tensor(x0)).data
    assert relative_error(total_grad, fd) < 1e-5
