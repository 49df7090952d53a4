"""Prediction and planning metrics, including box-exact collision checks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .geometry import OrientedBox2D, boxes_intersect, trajectory_yaws

EGO_HALF_EXTENTS = (2.04, 0.92)


@dataclass(frozen=True)
class PlanEvalConfig:
    horizons: tuple[float, ...] = (1.0, 2.0, 3.0)
    period: float = 0.5
    ego_half_extents: tuple[float, float] = EGO_HALF_EXTENTS
    miss_threshold: float = 2.0

    def __post_init__(self):
        if not self.horizons or any(h <= 0 for h in self.horizons) or list(self.horizons) != sorted(set(self.horizons)):
            raise ContractViolation("horizons must be positive and strictly increasing")
        if self.miss_threshold <= 0 or self.period <= 0:
            raise ContractViolation("threshold and period must be positive")

    def step_of(self, horizon: float) -> int:
        """1-based plan step nearest to ``horizon`` seconds."""
        return max(1, int(round(horizon / self.period)))


def _check_modes(modes, gt) -> tuple[np.ndarray, np.ndarray]:
    modes = np.asarray(modes, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if modes.ndim == 2:
        modes = modes[None]
    if modes.shape[1:] != gt.shape:
        raise ContractViolation(f"mode horizon {modes.shape[1:]} does not match ground truth {gt.shape}")
    return modes, gt


def min_ade_fde(modes, gt) -> tuple[float, float, int, int]:
    """(minADE, minFDE, argmin mode for ADE, argmin mode for FDE)."""
    modes, gt = _check_modes(modes, gt)
    dist = np.linalg.norm(modes - gt[None], axis=-1)
    ade, fde = dist.mean(axis=1), dist[:, -1]
    a, f = int(np.argmin(ade)), int(np.argmin(fde))
    return float(ade[a]), float(fde[f]), a, f


def miss_rate(batch_modes: Sequence, batch_gt: Sequence, threshold: float = 2.0) -> float:
    if threshold <= 0:
        raise ContractViolation("miss threshold must be positive")
    if len(batch_modes) == 0:
        return 0.0
    misses = [min_ade_fde(m, g)[1] > threshold for m, g in zip(batch_modes, batch_gt)]
    return float(np.mean(misses))


def planning_l2(plan, gt, cfg: PlanEvalConfig = PlanEvalConfig()) -> tuple[list[float], float]:
    plan = np.asarray(plan, dtype=float)
    gt = np.asarray(gt, dtype=float)
    steps = [cfg.step_of(h) for h in cfg.horizons]
    if len(plan) < steps[-1] or len(gt) < steps[-1]:
        raise ContractViolation(f"plan covers {len(plan)} steps, horizon needs {steps[-1]}")
    per = [float(np.linalg.norm(plan[s - 1] - gt[s - 1])) for s in steps]
    return per, float(np.mean(per))


@dataclass
class ObstacleTimeline:
    """Obstacles per plan step. ``agents[j][t]`` is agent j's footprint at plan step t+1."""

    static: list[OrientedBox2D] = field(default_factory=list)
    agents: list[list[OrientedBox2D]] = field(default_factory=list)

    def at(self, step: int) -> list[OrientedBox2D]:
        return list(self.static) + [a[step - 1] for a in self.agents]

    def covers(self, n_steps: int) -> bool:
        return all(len(a) >= n_steps for a in self.agents)


def ego_footprints(plan, cfg: PlanEvalConfig = PlanEvalConfig(), start=(0.0, 0.0), start_yaw: float = 0.0,
                   use_yaw: bool = True) -> list[OrientedBox2D]:
    """Ego boxes at each plan point. Headings come from the trajectory (the
    start pose is prepended); with ``use_yaw`` off the start heading is kept."""
    plan = np.asarray(plan, dtype=float)
    if use_yaw:
        yaws = trajectory_yaws(np.vstack([start, plan]), fallback=start_yaw)[1:]
    else:
        yaws = [start_yaw] * len(plan)
    return [OrientedBox2D(tuple(p), cfg.ego_half_extents, y) for p, y in zip(plan, yaws)]


def collision_flags(plan, world: ObstacleTimeline, cfg: PlanEvalConfig = PlanEvalConfig(),
                    start=(0.0, 0.0), start_yaw: float = 0.0, use_yaw: bool = True) -> list[bool]:
    """Per horizon: did any step up to it intersect an obstacle?"""
    plan = np.asarray(plan, dtype=float)
    last = cfg.step_of(cfg.horizons[-1])
    if len(plan) < last:
        raise ContractViolation(f"plan covers {len(plan)} steps, horizon needs {last}")
    if not world.covers(last):
        raise ContractViolation("obstacle timeline is shorter than the evaluation horizon")
    boxes = ego_footprints(plan[:last], cfg, start, start_yaw, use_yaw)
    hit = [any(boxes_intersect(boxes[t - 1], o) for o in world.at(t)) for t in range(1, last + 1)]
    first = next((t for t, h in enumerate(hit, start=1) if h), None)
    return [first is not None and first <= cfg.step_of(h) for h in cfg.horizons]


def collision_rate(plans: Sequence, worlds: Sequence[ObstacleTimeline], cfg: PlanEvalConfig = PlanEvalConfig(),
                   use_yaw: bool = True) -> list[float]:
    """Percent of samples flagged at each horizon."""
    if len(plans) == 0:
        return [0.0] * len(cfg.horizons)
    flags = np.array([collision_flags(p, w, cfg, use_yaw=use_yaw) for p, w in zip(plans, worlds)])
    return list(100.0 * flags.mean(axis=0))


def _cells_in(box: OrientedBox2D, cell: float) -> set[tuple[int, int]]:
    c = box.corners()
    lo = np.floor(c.min(axis=0) / cell).astype(int)
    hi = np.floor(c.max(axis=0) / cell).astype(int)
    ii, jj = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="ij")
    centers = np.stack([(ii.ravel() + 0.5) * cell, (jj.ravel() + 0.5) * cell], axis=1)
    inside = box.contains(centers)
    return set(zip(ii.ravel()[inside].tolist(), jj.ravel()[inside].tolist()))


def legacy_grid_collision(plan, world: ObstacleTimeline, cell: float = 0.5, cfg: PlanEvalConfig = PlanEvalConfig(),
                          start_yaw: float = 0.0) -> list[bool]:
    """Occupancy-grid comparison oracle: obstacles and the ego box (heading
    frozen at the start) are rasterized by cell centers; a step collides when
    they share a cell. Flags are per horizon, cumulative like the exact check."""
    if cell <= 0:
        raise ContractViolation("cell size must be positive")
    plan = np.asarray(plan, dtype=float)
    last = min(cfg.step_of(cfg.horizons[-1]), len(plan))
    hit = []
    for t in range(1, last + 1):
        ego = OrientedBox2D(tuple(plan[t - 1]), cfg.ego_half_extents, start_yaw)
        occupied = set()
        for o in world.at(t):
            occupied |= _cells_in(o, cell)
        hit.append(bool(_cells_in(ego, cell) & occupied))
    first = next((t for t, h in enumerate(hit, start=1) if h), None)
    return [first is not None and first <= cfg.step_of(h) for h in cfg.horizons]


# reference scenes for the two protocol corrections -----------------------------------------

def straight_plan(speed: float = 4.0, steps: int = 6, period: float = 0.5) -> np.ndarray:
    return np.array([[speed * period * k, 0.0] for k in range(1, steps + 1)])


def small_obstacle_scene() -> tuple[np.ndarray, ObstacleTimeline]:
    """A 0.3 m post grazing the ego's right side. No 0.5 m cell center falls
    inside the post, so the grid check cannot see it."""
    plan = straight_plan()
    post = OrientedBox2D((6.1, -1.0), (0.15, 0.15), 0.0)
    return plan, ObstacleTimeline(static=[post])


def rotating_ego_scene() -> tuple[np.ndarray, ObstacleTimeline]:
    """The ego turns left through a quarter circle of radius 8 m. A box sits
    where the rotated footprint sweeps but a heading-frozen footprint does not."""
    r, n = 8.0, 6
    phis = np.linspace(math.pi / 2 / n, math.pi / 2, n)
    plan = np.stack([r * np.sin(phis), r * (1 - np.cos(phis))], axis=1)
    # ahead of the ego's nose once it points north; 0.78 m clear of any
    # east-facing footprint
    block = OrientedBox2D((7.6, 9.9), (0.2, 0.2), 0.0)
    return plan, ObstacleTimeline(static=[block])


# CSV output ----------------------------------------------------------------------------------

METRIC_COLUMNS = ["minADE", "minFDE", "MR", "L2_1s", "L2_2s", "L2_3s", "L2_avg", "CR_1s", "CR_2s", "CR_3s"]
MI_COLUMNS = ["I_BI", "I_BT_given_I", "H_B_given_IT", "interaction"]


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(path, rows: list[dict], columns: list[str] | None = None, aggregate: bool = True) -> None:
    """One row per scenario plus a ``mean`` row of column means."""
    columns = columns or METRIC_COLUMNS
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario"] + columns)
        for r in rows:
            w.writerow([r["scenario"]] + [_cell(r[c]) for c in columns])
        if aggregate and rows:
            w.writerow(["mean"] + [_cell(np.mean([float(r[c]) for r in rows])) for c in columns])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
