"""Anchor clustering, feasibility masking, utility scoring and plan selection."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from shapely.geometry import Polygon
from shapely.ops import unary_union

from .errors import ContractViolation
from .geometry import OrientedBox2D, box_gap, boxes_intersect, normalize_angle, trajectory_yaws
from .metrics import EGO_HALF_EXTENTS, ObstacleTimeline, ego_footprints, PlanEvalConfig

RISK_SIGMA = 1.0


# anchors -------------------------------------------------------------------------------

@dataclass
class AnchorSet:
    anchors: np.ndarray  # (K, T, 2)
    labels: list[str]
    objective_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=float)
        if self.anchors.ndim != 3 or self.anchors.shape[0] < 1 or self.anchors.shape[2] != 2:
            raise ContractViolation("anchors must be (K >= 1, T, 2)")

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def horizon(self) -> int:
        return self.anchors.shape[1]


def maneuver_label(traj: np.ndarray, start_yaw: float = 0.0) -> str:
    traj = np.vstack([[0.0, 0.0], np.asarray(traj, float)])
    steps = np.linalg.norm(np.diff(traj, axis=0), axis=1)
    if steps.sum() < 1.0:
        return "stop"
    heading = trajectory_yaws(traj, fallback=start_yaw)[-1]
    turn = normalize_angle(heading - start_yaw)
    if turn > 0.5:
        return "left-turn"
    if turn < -0.5:
        return "right-turn"
    if steps[-1] < 0.6 * steps[0]:
        return "yield"
    return "straight"


def _objective(X: np.ndarray, centers: np.ndarray, assign: np.ndarray) -> float:
    return float(((X - centers[assign]) ** 2).sum())


def cluster_anchors(trajectories, K: int, seed: int = 0, max_iter: int = 100) -> AnchorSet:
    """Lloyd's k-means with k-means++ seeding on flattened trajectories."""
    X = np.asarray(trajectories, dtype=float)
    if X.ndim != 3:
        raise ContractViolation("trajectories must be (N, T, 2) with a shared horizon")
    n, T, _ = X.shape
    if K < 1 or n < K:
        raise ContractViolation(f"need at least K={K} trajectories, got {n}")
    flat = X.reshape(n, -1)
    rng = np.random.default_rng(seed)
    centers = [flat[int(rng.integers(n))]]
    for _ in range(1, K):
        d2 = np.min([((flat - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        idx = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centers.append(flat[idx])
    centers = np.array(centers)
    assign = None
    history = []
    for _ in range(max_iter):
        d2 = ((flat[:, None, :] - centers[None]) ** 2).sum(axis=-1)
        new_assign = np.argmin(d2, axis=1)
        history.append(_objective(flat, centers, new_assign))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(K):
            members = flat[assign == k]
            if len(members):
                centers[k] = members.mean(axis=0)
        history.append(_objective(flat, centers, assign))
    anchors = centers.reshape(K, T, 2)
    return AnchorSet(anchors, [maneuver_label(a) for a in anchors], history)


def anchor_similarity(traj, anchor) -> float:
    traj = np.asarray(traj, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    if traj.shape != anchor.shape:
        raise ContractViolation(f"horizons differ: {traj.shape} vs {anchor.shape}")
    return float(np.exp(-np.mean(np.sum((traj - anchor) ** 2, axis=-1))))


# world model -------------------------------------------------------------------------------

@dataclass(frozen=True)
class UtilityWeights:
    progress: float = 1.0
    comfort: float = 0.5
    risk: float = 2.0
    compliance: float = 0.5

    def __post_init__(self):
        w = (self.progress, self.comfort, self.risk, self.compliance)
        if any(x < 0 or not math.isfinite(x) for x in w) or not any(x > 0 for x in w):
            raise ContractViolation("utility weights must be nonnegative with at least one positive")


@dataclass
class DynamicAgent:
    """Predicted futures of one agent: ``modes`` (M, T, 2) from ``start``."""

    half_extents: tuple[float, float]
    modes: np.ndarray
    start: tuple[float, float]
    start_yaw: float = 0.0

    def footprints(self, horizon: int) -> list[list[OrientedBox2D]]:
        """Per mode, one box per step; short modes extend at their last velocity."""
        out = []
        for mode in np.asarray(self.modes, dtype=float):
            pts = np.vstack([self.start, mode])
            while len(pts) < horizon + 1:
                pts = np.vstack([pts, 2 * pts[-1] - pts[-2]])
            yaws = trajectory_yaws(pts, fallback=self.start_yaw)
            out.append([OrientedBox2D(tuple(pts[t]), self.half_extents, yaws[t]) for t in range(1, horizon + 1)])
        return out


@dataclass
class WorldModel:
    drivable: list[np.ndarray] = field(default_factory=list)  # empty means unconstrained
    static: list[OrientedBox2D] = field(default_factory=list)
    dynamic: list[DynamicAgent] = field(default_factory=list)
    route: np.ndarray | None = None
    start: tuple[float, float] = (0.0, 0.0)
    start_yaw: float = 0.0
    ego_half_extents: tuple[float, float] = EGO_HALF_EXTENTS

    def __post_init__(self):
        for poly in self.drivable:
            if not Polygon(poly).is_valid:
                raise ContractViolation("drivable polygons must be simple")

    @cached_property
    def _area(self):
        return unary_union([Polygon(p) for p in self.drivable]) if self.drivable else None

    def contains_box(self, box: OrientedBox2D) -> bool:
        if self._area is None:
            return True
        return bool(self._area.covers(Polygon(box.corners())))

    def dynamic_boxes(self, horizon: int) -> list[list[OrientedBox2D]]:
        """Every predicted agent track (all modes) as a list of per-step boxes."""
        cache = self.__dict__.setdefault("_dyn_cache", {})
        if horizon not in cache:
            cache[horizon] = [track for agent in self.dynamic for track in agent.footprints(horizon)]
        return cache[horizon]

    def timeline(self, horizon: int) -> ObstacleTimeline:
        return ObstacleTimeline(static=list(self.static), agents=self.dynamic_boxes(horizon))

    def ego_boxes(self, traj) -> list[OrientedBox2D]:
        cfg = PlanEvalConfig(ego_half_extents=self.ego_half_extents)
        return ego_footprints(traj, cfg, self.start, self.start_yaw)


def feasible(traj, world: WorldModel) -> bool:
    traj = np.asarray(traj, dtype=float)
    boxes = world.ego_boxes(traj)
    tracks = world.dynamic_boxes(len(traj))
    for t, box in enumerate(boxes):
        if not world.contains_box(box):
            return False
        if any(boxes_intersect(box, o) for o in world.static):
            return False
        if any(boxes_intersect(box, track[t]) for track in tracks):
            return False
    return True


def route_progress(point, route) -> float:
    """Arc length of the projection of ``point`` onto the route polyline."""
    route = np.asarray(route, dtype=float)
    p = np.asarray(point, dtype=float)
    best_d, best_s, acc = math.inf, 0.0, 0.0
    for a, b in zip(route[:-1], route[1:]):
        ab = b - a
        seg = float(np.linalg.norm(ab))
        t = 0.0 if seg == 0 else float(np.clip(np.dot(p - a, ab) / seg ** 2, 0.0, 1.0))
        d = float(np.linalg.norm(p - (a + t * ab)))
        if d < best_d - 1e-12:
            best_d, best_s = d, acc + t * seg
        acc += seg
    return best_s


@dataclass(frozen=True)
class UtilityTerms:
    progress: float
    jerk: float
    risk: float
    compliance: float

    def score(self, w: UtilityWeights) -> float:
        return (w.progress * self.progress - w.comfort * self.jerk - w.risk * self.risk
                + w.compliance * self.compliance)


def utility_terms(traj, world: WorldModel) -> UtilityTerms:
    traj = np.asarray(traj, dtype=float)
    pts = np.vstack([world.start, traj])
    if world.route is not None and len(world.route) >= 2:
        P = route_progress(pts[-1], world.route) - route_progress(pts[0], world.route)
    else:
        P = float(np.dot(pts[-1] - pts[0], [math.cos(world.start_yaw), math.sin(world.start_yaw)]))
    if len(pts) >= 3:
        second = pts[2:] - 2 * pts[1:-1] + pts[:-2]
        smooth = float(np.mean(np.sum(second ** 2, axis=1)))
    else:
        smooth = 0.0
    yaws = [world.start_yaw] + trajectory_yaws(pts, fallback=world.start_yaw)[1:]
    turn = float(np.mean([abs(normalize_angle(b - a)) for a, b in zip(yaws[:-1], yaws[1:])]))
    boxes = world.ego_boxes(traj)
    tracks = world.dynamic_boxes(len(traj))
    risk = 0.0
    for t, box in enumerate(boxes):
        others = list(world.static) + [track[t] for track in tracks]
        if not others:
            continue
        gap = min(0.0 if boxes_intersect(box, o) else box_gap(box, o) for o in others)
        risk = max(risk, math.exp(-gap ** 2 / (2 * RISK_SIGMA ** 2)))
    compliance = 1.0 if all(world.contains_box(b) for b in boxes) else 0.0
    return UtilityTerms(P, smooth + turn, risk, compliance)


def utility(traj, world: WorldModel, w: UtilityWeights = UtilityWeights()) -> float:
    return utility_terms(traj, world).score(w)


# selection -----------------------------------------------------------------------------------

@dataclass
class TrajectorySet:
    modes: np.ndarray  # (M, T, 2)
    logits: np.ndarray | None = None
    feasible: np.ndarray | None = None
    utility: np.ndarray | None = None
    risk: np.ndarray | None = None

    def __post_init__(self):
        self.modes = np.asarray(self.modes, dtype=float)
        if self.modes.ndim != 3 or self.modes.shape[0] < 1:
            raise ContractViolation("modes must be (M >= 1, T, 2)")
        if self.logits is None:
            self.logits = np.zeros(len(self.modes))

    def __len__(self) -> int:
        return len(self.modes)


@dataclass(frozen=True)
class Selection:
    index: int
    infeasible: bool


def score_modes(ts: TrajectorySet, world: WorldModel, w: UtilityWeights = UtilityWeights()) -> TrajectorySet:
    terms = [utility_terms(m, world) for m in ts.modes]
    ts.utility = np.array([t.score(w) for t in terms])
    ts.risk = np.array([t.risk for t in terms])
    ts.feasible = np.array([feasible(m, world) for m in ts.modes], dtype=bool)
    return ts


def select(ts: TrajectorySet, world: WorldModel, w: UtilityWeights = UtilityWeights()) -> Selection:
    """Highest-utility feasible mode (lowest index on ties); with no feasible
    mode, the lowest-risk one flagged as infeasible."""
    score_modes(ts, world, w)
    best = None
    for m in range(len(ts)):
        if ts.feasible[m] and (best is None or ts.utility[m] > ts.utility[best]):
            best = m
    if best is not None:
        return Selection(best, False)
    return Selection(int(np.argmin(ts.risk)), True)


# instance queue --------------------------------------------------------------------------------

@dataclass
class Track:
    track_id: int
    buffer: deque
    misses: int = 0

    @property
    def latest(self) -> np.ndarray:
        return self.buffer[-1][1]


@dataclass
class InstanceQueue:
    capacity: int = 4
    threshold: float = 0.5
    max_misses: int = 2
    tracks: dict[int, Track] = field(default_factory=dict)
    last_time: float = -math.inf
    next_id: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ContractViolation("queue capacity must be positive")


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0


def queue_update(queue: InstanceQueue, detections: Sequence, t: float) -> list[int]:
    """Greedy cosine association of detection features to open tracks.

    ``detections`` holds feature vectors or (instance, feature, score)
    tuples. Returns the track id given to each detection.
    """
    if t <= queue.last_time:
        raise ContractViolation(f"timestamp {t} is not after {queue.last_time}")
    feats = [np.asarray(d[1] if isinstance(d, tuple) else d, dtype=float).ravel() for d in detections]
    ids = list(queue.tracks)
    pairs = sorted(((-_cosine(f, queue.tracks[k].latest), i, j) for i, f in enumerate(feats)
                    for j, k in enumerate(ids)))
    assigned: list[int | None] = [None] * len(feats)
    taken = set()
    for neg_sim, i, j in pairs:
        if -neg_sim < queue.threshold:
            break
        if assigned[i] is None and j not in taken:
            assigned[i] = ids[j]
            taken.add(j)
    for j, k in enumerate(ids):
        tr = queue.tracks[k]
        if j in taken:
            tr.misses = 0
        else:
            tr.misses += 1
            if tr.misses >= queue.max_misses:
                del queue.tracks[k]
    for i, f in enumerate(feats):
        if assigned[i] is None:
            assigned[i] = queue.next_id
            queue.tracks[queue.next_id] = Track(queue.next_id, deque(maxlen=queue.capacity))
            queue.next_id += 1
        queue.tracks[assigned[i]].buffer.append((t, f))
    queue.last_time = t
    return [int(a) for a in assigned]


# closed loop -------------------------------------------------------------------------------------

@dataclass
class Decision:
    step: int
    utilities: list[float]
    feasible: list[bool]
    selected: int
    infeasible: bool
    pose: tuple[float, float, float]
    plan: list[list[float]]

    def record(self) -> dict:
        return {"step": self.step, "utilities": self.utilities, "feasible": self.feasible,
                "selected": self.selected, "infeasible": self.infeasible, "pose": list(self.pose)}


Proposer = Callable[[WorldModel, tuple[float, float, float]], "TrajectorySet | np.ndarray"]


def replan_loop(stream: Sequence[WorldModel], model: Proposer, w: UtilityWeights = UtilityWeights(),
                start=(0.0, 0.0, 0.0), log_path=None) -> list[Decision]:
    """Predict, score, select and commit the first point of the chosen plan at
    every world snapshot; the committed pose seeds the next step."""
    if len(stream) == 0:
        raise ContractViolation("world stream is empty")
    pose = tuple(float(v) for v in start)
    log: list[Decision] = []
    for step, world in enumerate(stream):
        world = replace(world, start=(pose[0], pose[1]), start_yaw=pose[2])
        out = model(world, pose)
        ts = out if isinstance(out, TrajectorySet) else TrajectorySet(out)
        sel = select(ts, world, w)
        plan = ts.modes[sel.index]
        disp = plan[0] - np.array(pose[:2])
        yaw = math.atan2(disp[1], disp[0]) if np.hypot(*disp) >= 1e-6 else pose[2]
        pose = (float(plan[0][0]), float(plan[0][1]), normalize_angle(yaw))
        log.append(Decision(step, [float(u) for u in ts.utility], [bool(f) for f in ts.feasible],
                            sel.index, sel.infeasible, pose, plan.tolist()))
    if log_path is not None:
        write_decision_log(log_path, log)
    return log


def write_decision_log(path, log: Sequence[Decision]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in log:
            fh.write(json.dumps(d.record(), sort_keys=True) + "\n")
