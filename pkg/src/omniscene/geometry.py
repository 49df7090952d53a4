"""Pinhole cameras, bilinear sampling, oriented BEV boxes and trajectory yaw.

Conventions:

* ego / world frame: x forward, y left, z up (meters)
* camera frame: x right, y down, z forward (so ``depth`` is camera z)
* image: u rightward, v downward, pixel centers at integer coordinates
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .numeric import Tensor, _result, as_tensor, stack

# ego (x fwd, y left, z up) -> camera (x right, y down, z fwd) for a camera facing +x
_EGO_TO_CAM = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
TOUCH_EPS = 1e-9


def normalize_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    r = -((-a + math.pi) % (2.0 * math.pi) - math.pi)
    return math.pi if r == -math.pi else r


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Camera:
    intrinsics: np.ndarray  # 3x3
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        K = np.asarray(self.intrinsics, dtype=float)
        if R.shape != (3, 3) or not np.allclose(R @ R.T, np.eye(3), atol=1e-9) \
                or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ContractViolation("camera rotation must be orthonormal with det +1")
        fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
        if fx <= 0 or fy <= 0 or not (0 <= cx < self.width) or not (0 <= cy < self.height):
            raise ContractViolation("camera intrinsics out of range")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def mounted(cls, yaw: float, position: Sequence[float], fx: float, fy: float,
                cx: float, cy: float, width: int, height: int) -> "Camera":
        """Camera at ``position`` in the ego frame, looking along ego heading + ``yaw``."""
        R = _EGO_TO_CAM @ rot_z(yaw).T
        t = -R @ np.asarray(position, dtype=float)
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, R, t, width, height)

    def at_pose(self, x: float, y: float, yaw: float) -> "Camera":
        """Re-express an ego-mounted camera for an ego placed at (x, y, yaw) in the world."""
        Rw = rot_z(yaw)
        c = np.array([x, y, 0.0])
        R = self.rotation @ Rw.T
        return Camera(self.intrinsics, R, self.translation - R @ c, self.width, self.height)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


def project(cam: Camera, p_world) -> tuple[float, float, float, bool]:
    pc = cam.rotation @ np.asarray(p_world, dtype=float) + cam.translation
    depth = float(pc[2])
    if depth <= 0:
        return float("nan"), float("nan"), depth, False
    K = cam.intrinsics
    u = K[0, 0] * pc[0] / depth + K[0, 2]
    v = K[1, 1] * pc[1] / depth + K[1, 2]
    visible = 0 <= u < cam.width and 0 <= v < cam.height
    return float(u), float(v), depth, bool(visible)


def unproject(cam: Camera, u: float, v: float, depth: float) -> np.ndarray:
    K = cam.intrinsics
    pc = depth * np.array([(u - K[0, 2]) / K[0, 0], (v - K[1, 2]) / K[1, 1], 1.0])
    return cam.rotation.T @ (pc - cam.translation)


def project_tensor(cam: Camera, points) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Project (N, 3) points, differentiably in the points.

    Returns pixel coordinates (N, 2), camera depth (N,) and a front-facing
    mask. Rows behind the camera carry finite placeholder coordinates.
    """
    points = as_tensor(points)
    pc = points @ cam.rotation.T + cam.translation
    z = pc[:, 2]
    front = z.data > 1e-6
    safe = z * front.astype(float) + (~front).astype(float)
    K = cam.intrinsics
    u = pc[:, 0] / safe * K[0, 0] + K[0, 2]
    v = pc[:, 1] / safe * K[1, 1] + K[1, 2]
    return stack([u, v], axis=-1), z.data.copy(), front


def bilinear_sample(fmap, u: float, v: float) -> np.ndarray:
    """4-neighbour blend of a (C, H, W) map; zero outside [0, W-1] x [0, H-1]."""
    fmap = np.asarray(fmap.data if isinstance(fmap, Tensor) else fmap, dtype=float)
    C, H, W = fmap.shape
    if not (0.0 <= u <= W - 1 and 0.0 <= v <= H - 1):
        return np.zeros(C)
    x0 = min(int(math.floor(u)), max(W - 2, 0))
    y0 = min(int(math.floor(v)), max(H - 2, 0))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    wx, wy = u - x0, v - y0
    return ((1 - wx) * (1 - wy) * fmap[:, y0, x0] + wx * (1 - wy) * fmap[:, y0, x1]
            + (1 - wx) * wy * fmap[:, y1, x0] + wx * wy * fmap[:, y1, x1])


def sample_points(fmap: np.ndarray, uv) -> Tensor:
    """Batched :func:`bilinear_sample` over ``uv`` of shape (..., 2), returning
    (..., C); differentiable with respect to the coordinates."""
    uv = as_tensor(uv)
    fmap = np.asarray(fmap, dtype=float)
    C, H, W = fmap.shape
    u, v = uv.data[..., 0], uv.data[..., 1]
    valid = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    x0 = np.minimum(np.floor(uc).astype(int), max(W - 2, 0))
    y0 = np.minimum(np.floor(vc).astype(int), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (uc - x0)[..., None]
    wy = (vc - y0)[..., None]
    m = np.moveaxis(fmap, 0, -1)  # H, W, C
    f00, f01, f10, f11 = m[y0, x0], m[y0, x1], m[y1, x0], m[y1, x1]
    keep = valid[..., None]
    out = ((1 - wx) * (1 - wy) * f00 + wx * (1 - wy) * f01 + (1 - wx) * wy * f10 + wx * wy * f11) * keep

    def backward(g):
        du = ((1 - wy) * (f01 - f00) + wy * (f11 - f10)) * keep
        dv = ((1 - wx) * (f10 - f00) + wx * (f11 - f01)) * keep
        return (np.stack([(g * du).sum(-1), (g * dv).sum(-1)], axis=-1),)

    return _result(out, (uv,), backward)


@dataclass(frozen=True)
class OrientedBox2D:
    center: tuple[float, float]
    half_extents: tuple[float, float]
    yaw: float = 0.0

    def __post_init__(self):
        hx, hy = self.half_extents
        if hx <= 0 or hy <= 0:
            raise ContractViolation("box half-extents must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "half_extents", (float(hx), float(hy)))
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    # boxes are immutable, so derived arrays are computed once (read-only)
    def axes(self) -> np.ndarray:
        ax = self.__dict__.get("_axes")
        if ax is None:
            c, s = math.cos(self.yaw), math.sin(self.yaw)
            ax = np.array([[c, s], [-s, c]])
            ax.flags.writeable = False
            self.__dict__["_axes"] = ax
        return ax

    def corners(self) -> np.ndarray:
        c = self.__dict__.get("_corners")
        if c is None:
            signs = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
            c = np.array(self.center) + (signs * self.half_extents) @ self.axes()
            c.flags.writeable = False
            self.__dict__["_corners"] = c
        return c

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(pts) - np.array(self.center)
        local = d @ self.axes().T
        return (np.abs(local[:, 0]) <= self.half_extents[0]) & (np.abs(local[:, 1]) <= self.half_extents[1])


def boxes_intersect(a: OrientedBox2D, b: OrientedBox2D) -> bool:
    """Separating-axis test; touching boxes intersect."""
    ca, cb = a.corners(), b.corners()
    for axis in np.vstack([a.axes(), b.axes()]):
        pa, pb = ca @ axis, cb @ axis
        if pa.max() < pb.min() - TOUCH_EPS or pb.max() < pa.min() - TOUCH_EPS:
            return False
    return True


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-300), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def box_gap(a: OrientedBox2D, b: OrientedBox2D) -> float:
    """Euclidean clearance between two boxes; zero when they intersect."""
    if boxes_intersect(a, b):
        return 0.0
    ca, cb = a.corners(), b.corners()
    best = math.inf
    for pts, poly in ((ca, cb), (cb, ca)):
        start, end = poly, np.roll(poly, -1, axis=0)
        ab = end - start  # (4, 2)
        ap = pts[:, None, :] - start[None]  # (4 points, 4 edges, 2)
        t = np.clip((ap * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-300), 0.0, 1.0)
        d = np.linalg.norm(ap - t[..., None] * ab, axis=-1)
        best = min(best, float(d.min()))
    return best


def yaw_from_trajectory(points, index: int, fallback: float = 0.0) -> float:
    """Heading at ``points[index]`` from the displacement to the next point
    (the last point uses the previous displacement). Displacements shorter
    than 1e-6 m fall back to the nearest earlier valid heading, else
    ``fallback``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        raise ContractViolation("yaw_from_trajectory needs at least one point")
    if not 0 <= index < n:
        raise ContractViolation(f"index {index} out of range for {n} points")
    return trajectory_yaws(pts, fallback)[index]


def trajectory_yaws(points, fallback: float = 0.0) -> list[float]:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        raise ContractViolation("trajectory must contain at least one point")
    yaws: list[float] = []
    last_valid = fallback
    for i in range(n):
        if n == 1:
            disp = np.zeros(2)
        elif i < n - 1:
            disp = pts[i + 1] - pts[i]
        else:
            disp = pts[i] - pts[i - 1]
        if math.hypot(disp[0], disp[1]) >= 1e-6:
            last_valid = normalize_angle(math.atan2(disp[1], disp[0]))
        yaws.append(last_valid)
    return yaws


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # length (along heading), width, height
    yaw: float = 0.0
    cls: int = 0
    score: float = 1.0

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ContractViolation("box size components must be positive")
        if not 0.0 <= self.score <= 1.0:
            raise ContractViolation("box score must lie in [0, 1]")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(c) for c in self.size))

    def footprint(self) -> OrientedBox2D:
        return OrientedBox2D(self.center[:2], (self.size[0] / 2, self.size[1] / 2), self.yaw)

    def params(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw])


def point_in_polygon(pt, polygon) -> bool:
    """Even-odd ray casting; boundary points are treated as inside."""
    x, y = float(pt[0]), float(pt[1])
    poly = np.asarray(polygon, dtype=float)
    inside = False
    n = len(poly)
    for i in range(n):
        (x1, y1), (x2, y2) = poly[i], poly[(i + 1) % n]
        if _point_segment_distance(np.array([x, y]), poly[i], poly[(i + 1) % n]) <= 1e-12:
            return True
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xc:
                inside = not inside
    return inside
