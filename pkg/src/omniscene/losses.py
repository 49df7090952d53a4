"""Training objectives: bipartite matching, focal and L1 terms, task losses."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ContractViolation
from .numeric import Tensor, as_tensor, clamp_min, log, power, softmax, stack, tabs, take, tmean, tsum

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    det_c: float = 1.0
    det_r: float = 1.0
    map_c: float = 1.0
    map_r: float = 1.0
    depth: float = 1.0
    motion_c: float = 1.0
    motion_r: float = 1.0
    plan_c: float = 1.0
    plan_r: float = 1.0
    plan_status: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ContractViolation(f"loss weight {f.name}={v} must be finite and >= 0")


# matching ----------------------------------------------------------------------------

def hungarian_match(cost) -> list[int]:
    """Minimum-cost assignment of every row (ground truth) to a distinct column
    (prediction). Returns the column chosen for each row.

    Shortest augmenting paths with potentials, O(n^2 m).
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2:
        raise ContractViolation("cost must be a matrix")
    n, m = C.shape
    if n > m:
        raise ContractViolation(f"{n} ground truths cannot be matched to {m} predictions")
    if not np.all(np.isfinite(C)):
        raise ContractViolation("costs must be finite")
    if n == 0:
        return []
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j] = row (1-based) holding column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = C[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    result = [0] * n
    for j in range(1, m + 1):
        if owner[j]:
            result[owner[j] - 1] = j - 1
    return result


def assignment_cost(cost, assignment) -> float:
    C = np.asarray(cost, dtype=float)
    return float(sum(C[i, j] for i, j in enumerate(assignment)))


# elementary terms ----------------------------------------------------------------------

def focal_loss(p, y, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """-alpha (1 - p_y)^gamma log p_y, averaged over rows when ``p`` is (B, K)."""
    if not 0.0 <= alpha <= 1.0 or gamma < 0:
        raise ContractViolation("focal loss needs 0 <= alpha <= 1 and gamma >= 0")
    p = as_tensor(p)
    single = p.ndim == 1
    P = p.reshape(1, -1) if single else p
    y = np.atleast_1d(np.asarray(y, dtype=int))
    if np.any(P.data < -1e-12) or np.any(np.abs(P.data.sum(axis=1) - 1.0) > 1e-6):
        raise ContractViolation("focal loss needs rows that are probability distributions")
    if len(y) != P.shape[0] or np.any(y < 0) or np.any(y >= P.shape[1]):
        raise ContractViolation("labels do not index the distribution")
    py = clamp_min(take(P, (np.arange(len(y)), y)), PROB_FLOOR)
    weight = power(1.0 - py, gamma) if gamma != 0 else 1.0
    return tmean(-alpha * weight * log(py))


def binary_focal_loss(score, target, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Focal loss on a probability vector ``score`` (N,) against 0/1 targets."""
    s = as_tensor(score)
    probs = stack([1.0 - s, s], axis=-1)
    return focal_loss(probs, np.asarray(target, dtype=int), alpha, gamma)


def l1_box_loss(pred, gt) -> Tensor:
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ContractViolation(f"box parameter shapes differ: {pred.shape} vs {gt.shape}")
    return tmean(tabs(pred - gt))


def depth_loss(d_pred, d_gt, weight: float = 1.0) -> Tensor:
    d_pred = as_tensor(d_pred)
    return weight * tmean(tabs(d_pred - np.asarray(d_gt, dtype=float)))


def _ade(modes: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.linalg.norm(modes - gt[None], axis=-1).mean(axis=-1)


@dataclass
class WinnerTakeAll:
    regression: Tensor
    classification: Tensor
    winners: np.ndarray


def winner_take_all(modes, logits, gt, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA) -> WinnerTakeAll:
    """L1 on the lowest-ADE mode and focal classification with it as the label.

    ``modes`` (N, M, T, 2) or (M, T, 2); ``logits`` (N, M) or (M,); ``gt``
    (N, T, 2) or (T, 2). Terms are averaged over instances.
    """
    modes, logits = as_tensor(modes), as_tensor(logits)
    gt = np.asarray(gt, dtype=float)
    if modes.ndim == 3:
        modes, logits, gt = modes.reshape(1, *modes.shape), logits.reshape(1, -1), gt[None]
    N, M, T, _ = modes.shape
    if gt.shape != (N, T, 2):
        raise ContractViolation(f"ground truth {gt.shape} does not match modes {modes.shape}")
    if logits.shape != (N, M):
        raise ContractViolation("one logit per mode is required")
    winners = np.array([int(np.argmin(_ade(modes.data[i], gt[i]))) for i in range(N)])
    best = take(modes, (np.arange(N), winners))  # (N, T, 2)
    reg = tmean(tabs(best - gt))
    cls = focal_loss(softmax(logits, axis=-1), winners, alpha, gamma)
    return WinnerTakeAll(reg, cls, winners)


def motion_loss(modes, logits, gt, weights: LossWeights, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA) -> Tensor:
    wta = winner_take_all(modes, logits, gt, alpha, gamma)
    return weights.motion_r * wta.regression + weights.motion_c * wta.classification


def planning_loss(modes, logits, gt, status_pred, status_gt, weights: LossWeights,
                  alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA) -> Tensor:
    wta = winner_take_all(modes, logits, gt, alpha, gamma)
    status = tmean(tabs(as_tensor(status_pred) - np.asarray(status_gt, dtype=float)))
    return (weights.plan_r * wta.regression + weights.plan_c * wta.classification
            + weights.plan_status * status)


# set-prediction losses -------------------------------------------------------------------

def detection_cost(scores: np.ndarray, class_probs: np.ndarray, boxes: np.ndarray,
                   gt_cls: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """(N_gt, N_pred) cost: (1 - score * p_class) + mean L1 box distance."""
    p = scores[None, :] * class_probs[:, gt_cls].T
    l1 = np.abs(gt_boxes[:, None, :] - boxes[None, :, :]).mean(axis=-1)
    return (1.0 - p) + l1


def set_loss(scores, class_logits, params, gt_cls, gt_params, w_c: float, w_r: float,
             alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA) -> tuple[Tensor, list[int]]:
    """Hungarian-matched focal + L1 loss shared by detection and map heads.

    ``scores`` (N,) probabilities, ``class_logits`` (N, K), ``params`` (N, P);
    ground truth ``gt_cls`` (G,), ``gt_params`` (G, P). Unmatched predictions
    are pushed toward score 0.
    """
    scores, class_logits, params = as_tensor(scores), as_tensor(class_logits), as_tensor(params)
    gt_cls = np.asarray(gt_cls, dtype=int)
    gt_params = np.asarray(gt_params, dtype=float).reshape(len(gt_cls), params.shape[-1])
    probs = softmax(class_logits, axis=-1)
    n = scores.shape[0]
    if len(gt_cls) == 0:
        return w_c * binary_focal_loss(scores, np.zeros(n, dtype=int), alpha, gamma), []
    cost = detection_cost(scores.data, probs.data, params.data, gt_cls, gt_params)
    match = hungarian_match(cost)
    target = np.zeros(n, dtype=int)
    target[match] = 1
    cls_term = binary_focal_loss(scores, target, alpha, gamma) + focal_loss(
        take(probs, np.array(match)), gt_cls, alpha, gamma)
    reg_term = l1_box_loss(take(params, np.array(match)), gt_params)
    return w_c * cls_term + w_r * reg_term, match


def total_loss(det, map_, depth, motion, planning) -> Tensor:
    return as_tensor(det) + map_ + depth + motion + planning
