"""Sparse 3D instance queries: multi-view sampling, aggregation and proposals."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .geometry import Box3D, project_tensor, sample_points
from .numeric import Mlp, Tensor, as_tensor, concat, exp, mlp_forward, sigmoid, stack, tsum
from .simulator import CLASS_SIZES, SCENE_HALF, SCENE_HALF_Z

NUM_CLASSES = 3
PPH_WIDTH = 1 + 3 + 3 + 1 + NUM_CLASSES
PRIOR_SIZES = np.array([CLASS_SIZES[c] for c in range(NUM_CLASSES)])


@dataclass
class QuerySet:
    embeddings: Tensor  # (N, d)
    positions: Tensor  # (N, 3)
    sizes: Tensor  # (N, 3)

    def __post_init__(self):
        n = self.embeddings.shape[0]
        if self.positions.shape != (n, 3) or self.sizes.shape != (n, 3):
            raise ContractViolation("query embeddings, positions and sizes disagree on N")
        if np.any(self.sizes.data <= 0):
            raise ContractViolation("query sizes must be positive")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @classmethod
    def grid(cls, n: int, d: int, rng: np.random.Generator,
             half_extents=(SCENE_HALF, SCENE_HALF, SCENE_HALF_Z)) -> "QuerySet":
        """Positions on a uniform grid over the scene volume (cell centers)."""
        if n < 1:
            raise ContractViolation("need at least one query")
        nz = 2 if n >= 2 else 1
        nxy = int(np.ceil(np.sqrt(n / nz)))
        axes = [(np.arange(k) + 0.5) / k * 2 * h - h for k, h in zip((nxy, nxy, nz), half_extents)]
        pts = np.array(list(itertools.product(*axes)))[:n]
        return cls(Tensor(rng.normal(0.0, 0.1, (n, d)), requires_grad=True),
                   Tensor(pts, requires_grad=True),
                   Tensor(np.tile(PRIOR_SIZES[0], (n, 1)), requires_grad=True))

    def clamp_to_volume(self, half_extents=(SCENE_HALF, SCENE_HALF, SCENE_HALF_Z)) -> None:
        np.clip(self.positions.data, -np.asarray(half_extents), np.asarray(half_extents),
                out=self.positions.data)


@dataclass
class Instance3D:
    feature: Tensor
    box: Box3D
    horizon: int = 3
    history: list[Tensor] = field(default_factory=list)

    def push(self, feature: Tensor) -> None:
        self.history.append(feature)
        if len(self.history) > self.horizon:
            del self.history[0]


def sample_multiview(positions, cameras, feature_maps) -> tuple[Tensor, np.ndarray]:
    """Bilinear samples (N, M, C) at each position's projection plus the (N, M)
    visibility mask. Views that cannot see a point contribute zero rows."""
    if len(cameras) == 0 or len(cameras) != len(feature_maps):
        raise ContractViolation("rig must have at least one camera and one map per camera")
    channels = {f.shape[0] for f in feature_maps}
    if len(channels) != 1:
        raise ContractViolation("feature maps must share a channel count")
    positions = as_tensor(positions)
    rows, masks = [], []
    for cam, fmap in zip(cameras, feature_maps):
        uv, _, front = project_tensor(cam, positions)
        u, v = uv.data[:, 0], uv.data[:, 1]
        visible = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        rows.append(sample_points(fmap, uv) * visible[:, None].astype(float))
        masks.append(visible)
    return stack(rows, axis=1), np.stack(masks, axis=1)


def aggregate_views(samples, mask) -> Tensor:
    """Visibility-masked mean over the view axis; all-invisible rows become zero."""
    samples = as_tensor(samples)
    mask = np.asarray(mask, dtype=float)
    count = mask.sum(axis=1, keepdims=True)
    weights = mask / np.maximum(count, 1.0)
    return tsum(samples * weights[:, :, None], axis=1)


def fuse_query(f, q) -> Tensor:
    f, q = as_tensor(f), as_tensor(q)
    if f.shape[0] != q.shape[0]:
        raise ContractViolation(f"row counts differ: {f.shape[0]} vs {q.shape[0]}")
    return concat([f, q], axis=-1)


@dataclass
class ProposalTensors:
    """Differentiable head outputs for N queries."""

    score: Tensor  # (N,)
    center: Tensor  # (N, 3)
    size: Tensor  # (N, 3)
    yaw: Tensor  # (N,)
    class_logits: Tensor  # (N, NUM_CLASSES)

    def box_params(self) -> Tensor:
        return concat([self.center, self.size, self.yaw.reshape(-1, 1)], axis=-1)


def pph_forward(pph: Mlp, F, positions) -> ProposalTensors:
    if pph.widths[-1] != PPH_WIDTH:
        raise ContractViolation(f"proposal head must emit {PPH_WIDTH} values, not {pph.widths[-1]}")
    out = mlp_forward(pph, F)
    cls_logits = out[:, 8:]
    cls = np.argmax(cls_logits.data, axis=1)
    prior = PRIOR_SIZES[cls]
    return ProposalTensors(
        score=sigmoid(out[:, 0]),
        center=as_tensor(positions) + out[:, 1:4],
        size=exp(out[:, 4:7]) * prior,
        yaw=out[:, 7],
        class_logits=cls_logits,
    )


def propose(pph: Mlp, F, positions) -> list[tuple[float, Box3D]]:
    t = pph_forward(pph, F, positions)
    cls = np.argmax(t.class_logits.data, axis=1)
    return [(float(t.score.data[i]),
             Box3D(tuple(t.center.data[i]), tuple(t.size.data[i]), float(t.yaw.data[i]), int(cls[i]),
                   float(t.score.data[i])))
            for i in range(len(cls))]


def threshold(proposals, tau: float, features=None, horizon: int = 3) -> list[Instance3D]:
    """Keep proposals with score strictly above ``tau``, in input order."""
    if not 0.0 <= tau <= 1.0:
        raise ContractViolation(f"threshold {tau} outside [0, 1]")
    kept = []
    for i, (score, box) in enumerate(proposals):
        if score > tau:
            feat = features[i] if features is not None else Tensor(np.zeros(0))
            kept.append(Instance3D(feat, box, horizon))
    return kept
