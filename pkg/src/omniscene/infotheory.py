"""Exact information measures over small discrete joint tables (nats).

Axis 0 is the instance variable B, axis 1 the vision variable I and axis 2
the text variable T.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

B, I, T = 0, 1, 2


@dataclass(frozen=True)
class JointDistribution:
    table: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.table, dtype=float)
        if p.ndim != 3:
            raise ContractViolation("joint table must have three axes (B, I, T)")
        if np.any(~np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ContractViolation("joint table must be nonnegative and sum to 1")
        object.__setattr__(self, "table", p)

    @property
    def arity(self) -> tuple[int, ...]:
        return self.table.shape


def _table(p) -> np.ndarray:
    return p.table if isinstance(p, JointDistribution) else JointDistribution(p).table


def _entropy_of(p: np.ndarray, keep: tuple[int, ...]) -> float:
    drop = tuple(a for a in range(p.ndim) if a not in keep)
    m = p.sum(axis=drop) if drop else p
    m = m[m > 0]
    return float(-(m * np.log(m)).sum())


def entropy(p, axes=(B,)) -> float:
    return _entropy_of(_table(p), tuple(axes))


def mutual_information(p, a=(B,), b=(I, T)) -> float:
    """I(X_a; X_b) by direct summation of p log(p / (p_a p_b))."""
    t = _table(p)
    a, b = tuple(a), tuple(b)
    if set(a) & set(b):
        raise ContractViolation("variable groups must be disjoint")
    drop = tuple(x for x in range(3) if x not in a + b)
    joint = t.sum(axis=drop, keepdims=True) if drop else t
    pa = joint.sum(axis=b, keepdims=True)
    pb = joint.sum(axis=a, keepdims=True)
    nz = joint > 0
    ratio = np.where(nz, joint / np.where(nz, pa * pb, 1.0), 1.0)
    return float((joint[nz] * np.log(ratio[nz])).sum())


def conditional_mutual_information(p, a=(B,), b=(I,), given=(T,)) -> float:
    """I(X_a; X_b | X_c) = H(a,c) + H(b,c) - H(a,b,c) - H(c)."""
    t = _table(p)
    a, b, c = tuple(a), tuple(b), tuple(given)
    return (_entropy_of(t, a + c) + _entropy_of(t, b + c) - _entropy_of(t, a + b + c)
            - _entropy_of(t, c))


def conditional_entropy(p) -> float:
    """H(B | I, T)."""
    t = _table(p)
    return _entropy_of(t, (B, I, T)) - _entropy_of(t, (I, T))


def interaction_information(p) -> float:
    """I(B; I) - I(B; I | T): negative for synergy, positive for redundancy."""
    t = _table(p)
    return mutual_information(t, (B,), (I,)) - conditional_mutual_information(t, (B,), (I,), (T,))


@dataclass(frozen=True)
class MiReport:
    I_BI: float
    I_BT_given_I: float
    H_B_given_IT: float
    interaction: float

    @property
    def I_B_IT(self) -> float:
        return self.I_BI + self.I_BT_given_I

    def as_dict(self) -> dict[str, float]:
        return {"I_BI": self.I_BI, "I_BT_given_I": self.I_BT_given_I,
                "H_B_given_IT": self.H_B_given_IT, "interaction": self.interaction}


def report(p) -> MiReport:
    t = _table(p)
    return MiReport(mutual_information(t, (B,), (I,)),
                    conditional_mutual_information(t, (B,), (T,), (I,)),
                    conditional_entropy(t),
                    interaction_information(t))


def principal_projection(x) -> np.ndarray:
    """Scores on the first principal direction (sign fixed so the largest
    loading is positive). Constant input projects to zeros."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    centered = x - x.mean(axis=0)
    if not np.any(np.abs(centered) > 1e-12):
        return np.zeros(len(x))
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    direction = vt[0]
    if direction[np.argmax(np.abs(direction))] < 0:
        direction = -direction
    return centered @ direction


def equal_frequency_bins(values, bins: int) -> np.ndarray:
    """Rank-based bins with stable ordering; tied values share the bin of the
    first member of their tie group."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    rank = np.arange(n)
    # first rank within each run of equal values
    starts = np.r_[True, np.abs(np.diff(sorted_vals)) > 1e-12]
    group_rank = np.maximum.accumulate(np.where(starts, rank, 0))
    out = np.empty(n, dtype=int)
    out[order] = np.minimum(group_rank * bins // n, bins - 1)
    return out


def discretize_features(instance, vision, text, bins: int = 4) -> JointDistribution:
    """Empirical joint table of binned first-principal projections."""
    if bins < 2:
        raise ContractViolation("need at least two bins")
    blocks = [np.asarray(x, dtype=float) for x in (instance, vision, text)]
    n = len(blocks[0])
    if any(len(x) != n for x in blocks):
        raise ContractViolation("feature blocks must share the batch size")
    if n < bins:
        raise ContractViolation(f"batch of {n} is smaller than {bins} bins")
    idx = [equal_frequency_bins(principal_projection(x), bins) for x in blocks]
    table = np.zeros((bins, bins, bins))
    np.add.at(table, tuple(idx), 1.0)
    return JointDistribution(table / n)
