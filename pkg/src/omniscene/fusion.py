"""Hierarchical instance fusion: temporal and spatial attention, deformable
visual aggregation, text gating and depth refinement.

Every operation is batched over instances (leading axis N) and keeps the
per-instance semantics. Weight matrices act on column vectors, so a row batch
``F`` is mapped by ``F @ W.T``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .geometry import project_tensor, sample_points
from .numeric import (Mlp, Tensor, as_tensor, clamp_min, concat, matmul, mlp_forward, sigmoid, softmax,
                      stack, tabs, tsum)

MIN_DEPTH = 0.1


@dataclass
class AttentionParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    U_Q: Tensor
    U_K: Tensor
    U_V: Tensor

    def __post_init__(self):
        d = self.W_Q.shape[0]
        for name in ("W_Q", "W_K", "W_V", "U_Q", "U_K", "U_V"):
            if getattr(self, name).shape != (d, d):
                raise ContractViolation(f"{name} must be {d}x{d}")

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, scale: float | None = None) -> "AttentionParams":
        s = scale if scale is not None else 1.0 / math.sqrt(d)
        return cls(*(Tensor(rng.normal(0.0, s, (d, d)), requires_grad=True) for _ in range(6)))


@dataclass
class DeformableParams:
    offsets: Mlp  # d -> M*K*2 pixel offsets
    W_v: Tensor  # (d, C)
    w_alpha: Tensor  # (C,)
    n_views: int
    n_points: int

    def __post_init__(self):
        if self.n_points < 1 or self.n_views < 1:
            raise ContractViolation("need at least one view and one sampling point")
        if self.offsets.widths[-1] != self.n_views * self.n_points * 2:
            raise ContractViolation("offset head width must be M*K*2")
        if self.W_v.shape[1] != self.w_alpha.shape[0]:
            raise ContractViolation("W_v and w_alpha disagree on the channel count")

    @classmethod
    def init(cls, d: int, channels: int, n_views: int, n_points: int, rng: np.random.Generator,
             hidden: int = 16) -> "DeformableParams":
        offsets = Mlp.init([d, hidden, n_views * n_points * 2], rng)
        # last layer starts at zero so sampling begins at the projected centers
        offsets.weights[-1].data[:] = 0.0
        return cls(offsets,
                   Tensor(rng.normal(0.0, 1.0 / math.sqrt(channels), (d, channels)), requires_grad=True),
                   Tensor(rng.normal(0.0, 0.1, channels), requires_grad=True),
                   n_views, n_points)


@dataclass
class TextFusionParams:
    W_f: Tensor  # (d', d')
    W_t: Tensor  # (d', d_T)
    w_gamma: Tensor  # (2d',)
    b_gamma: Tensor  # scalar

    def __post_init__(self):
        dp = self.W_f.shape[0]
        if self.W_t.shape[0] != dp or self.w_gamma.shape != (2 * dp,) or self.b_gamma.data.size != 1:
            raise ContractViolation("text fusion widths are inconsistent")

    @classmethod
    def init(cls, d_in: int, d_text: int, rng: np.random.Generator, d_out: int | None = None):
        d_out = d_out or d_in
        return cls(Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_out, d_in)), requires_grad=True),
                   Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_text), (d_out, d_text)), requires_grad=True),
                   Tensor(rng.normal(0.0, 0.1, 2 * d_out), requires_grad=True),
                   Tensor(np.zeros(()), requires_grad=True))


def _rows(x: Tensor, W: Tensor) -> Tensor:
    return matmul(x, W.T)


def temporal_cross_attention(history, params: AttentionParams, mask=None, return_weights: bool = False):
    """Each instance attends over its own history.

    ``history`` is (N, T+1, d) with slot 0 the current frame; ``mask`` (N, T+1)
    marks present slots (slot 0 must be present).
    """
    H = as_tensor(history)
    if H.ndim != 3 or H.shape[1] == 0:
        raise ContractViolation("history must be (N, T+1, d) with at least the current frame")
    d = params.d
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask[:, 0].all():
            raise ContractViolation("the current frame must be present in every history")
    q = _rows(H[:, 0, :], params.W_Q)  # (N, d)
    keys = _rows(H, params.W_K)  # (N, T+1, d)
    values = _rows(H, params.W_V)
    scores = tsum(keys * q.reshape(q.shape[0], 1, d), axis=-1) * (1.0 / math.sqrt(d))
    alpha = softmax(scores, axis=-1, mask=mask)
    out = tsum(values * alpha.reshape(*alpha.shape, 1), axis=1)
    return (out, alpha) if return_weights else out


def spatial_self_attention(frame, params: AttentionParams, return_weights: bool = False):
    """Full single-head self-attention across the N instances of one frame."""
    X = as_tensor(frame)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ContractViolation("frame must be (N, d) with N >= 1")
    d = params.d
    q = _rows(X, params.U_Q)
    k = _rows(X, params.U_K)
    v = _rows(X, params.U_V)
    beta = softmax(matmul(q, k.T) * (1.0 / math.sqrt(d)), axis=-1)
    out = matmul(beta, v)
    return (out, beta) if return_weights else out


def deformable_aggregate(features, positions, cameras, feature_maps, params: DeformableParams,
                         return_weights: bool = False):
    """Sample K points per view around each instance projection, weight the
    M*K samples with a joint softmax and project them to width d.

    ``features`` (N, d) predicts the pixel offsets; ``positions`` (N, 3).
    Views that cannot see an instance supply zero samples (logit 0).
    """
    F = as_tensor(features)
    N = F.shape[0]
    M, K = params.n_views, params.n_points
    if len(cameras) != M or len(feature_maps) != M:
        raise ContractViolation(f"expected {M} views, got {len(cameras)}")
    offsets = mlp_forward(params.offsets, F).reshape(N, M, K, 2)
    samples = []
    for m, (cam, fmap) in enumerate(zip(cameras, feature_maps)):
        uv, _, front = project_tensor(cam, positions)  # (N, 2)
        pts = uv.reshape(N, 1, 2) + offsets[:, m]  # (N, K, 2)
        z = sample_points(fmap, pts)  # (N, K, C)
        samples.append(z * front[:, None, None].astype(float))
    Z = concat(samples, axis=1)  # (N, M*K, C)
    logits = matmul(Z, params.w_alpha)  # (N, M*K)
    alpha = softmax(logits, axis=-1)
    pooled = tsum(Z * alpha.reshape(N, M * K, 1), axis=1)  # (N, C)
    out = _rows(pooled, params.W_v)
    return (out, alpha) if return_weights else out


def fuse_vision(F_hat, v) -> Tensor:
    F_hat, v = as_tensor(F_hat), as_tensor(v)
    if F_hat.shape != v.shape:
        raise ContractViolation(f"cannot fuse widths {F_hat.shape} and {v.shape}")
    return concat([F_hat, v], axis=-1)


def text_conditional_aggregate(F_final, text, params: TextFusionParams, return_gate: bool = False):
    """f + gamma * t with a sigmoid gate computed from [f || t].

    ``F_final`` is (N, d') or (d',); ``text`` is one (d_T,) vector shared by
    all instances.
    """
    F = as_tensor(F_final)
    single = F.ndim == 1
    if single:
        F = F.reshape(1, -1)
    T = as_tensor(text)
    if F.shape[1] != params.W_f.shape[1] or T.shape != (params.W_t.shape[1],):
        raise ContractViolation("feature or text width does not match the fusion parameters")
    f = _rows(F, params.W_f)  # (N, d')
    t = matmul(params.W_t, T)  # (d',)
    N, dp = f.shape
    t_rows = t.reshape(1, dp) + Tensor(np.zeros((N, dp)))
    gate = sigmoid(matmul(concat([f, t_rows], axis=-1), params.w_gamma) + params.b_gamma)  # (N,)
    out = f + t_rows * gate.reshape(N, 1)
    if single:
        out, gate = out.reshape(dp), gate.reshape(())
    return (out, gate) if return_gate else out


def refine_depth(F_text, d_init, head: Mlp) -> Tensor:
    """d_init plus an MLP residual, floored at 0.1 m. Batched over rows."""
    d_init = np.asarray(d_init, dtype=float)
    if np.any(d_init <= 0):
        raise ContractViolation("initial depth must be positive")
    F = as_tensor(F_text)
    single = F.ndim == 1
    if single:
        F = F.reshape(1, -1)
    delta = mlp_forward(head, F)[:, 0]
    out = clamp_min(delta + d_init.reshape(-1), MIN_DEPTH)
    return out.reshape(()) if single else out


@dataclass
class DepthAlignment:
    loss: Tensor
    visible_views: int


def depth_alignment_loss(d_refined, position, cameras, depth_maps) -> DepthAlignment:
    """Mean |d_refined - D_m(u_m, v_m)| over the views that see ``position``."""
    if len(cameras) < 1:
        raise ContractViolation("need at least one view")
    d = as_tensor(d_refined)
    targets = []
    for cam, dmap in zip(cameras, depth_maps):
        uv, _, front = project_tensor(cam, np.asarray(position, float).reshape(1, 3))
        u, v = uv.data[0]
        if front[0] and 0 <= u <= cam.width - 1 and 0 <= v <= cam.height - 1:
            targets.append(float(sample_points(dmap[None], uv).data[0, 0]))
    if not targets:
        return DepthAlignment(Tensor(0.0), 0)
    diffs = tabs(d.reshape(1) - np.array(targets))
    return DepthAlignment(tsum(diffs) * (1.0 / len(targets)), len(targets))


def depth_targets(positions, cameras, depth_maps) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance mean depth-map value over the views that see each
    position, and the visible-view counts. Useful as a batched target."""
    positions = np.asarray(positions, dtype=float)
    total = np.zeros(len(positions))
    count = np.zeros(len(positions))
    for cam, dmap in zip(cameras, depth_maps):
        uv, _, front = project_tensor(cam, positions)
        u, v = uv.data[:, 0], uv.data[:, 1]
        ok = front & (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
        vals = sample_points(dmap[None], uv).data[:, 0]
        total += np.where(ok, vals, 0.0)
        count += ok
    return total / np.maximum(count, 1), count.astype(int)


def batched_depth_alignment(d_refined, positions, cameras, depth_maps) -> tuple[Tensor, np.ndarray]:
    """Per-instance view-wise alignment loss (N,), with the visible counts."""
    d = as_tensor(d_refined)
    positions = np.asarray(positions, dtype=float)
    terms, counts = [], np.zeros(len(positions))
    for cam, dmap in zip(cameras, depth_maps):
        uv, _, front = project_tensor(cam, positions)
        u, v = uv.data[:, 0], uv.data[:, 1]
        ok = (front & (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)).astype(float)
        vals = sample_points(dmap[None], uv).data[:, 0]
        terms.append(tabs(d - np.where(ok > 0, vals, 0.0)) * ok)
        counts += ok
    total = tsum(stack(terms, axis=0), axis=0)
    return total * (1.0 / np.maximum(counts, 1.0)), counts.astype(int)
