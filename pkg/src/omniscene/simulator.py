"""Synthetic driving scenarios at 2 Hz.

The world frame of every generated scenario coincides with the ego frame at
the ``current`` step: the ego sits at the origin heading +x there. Roads run
along x (right-hand traffic, ego in lane 0 at y = 0); an optional cross road
runs along y. Past steps precede ``current``; future steps follow it.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import ContractViolation
from .geometry import Box3D, Camera, OrientedBox2D, boxes_intersect, normalize_angle, project, rot_z

PERIOD = 0.5
HISTORY = 3
FUTURE = 6
SCENE_HALF = 50.0
SCENE_HALF_Z = 3.0
LANE_WIDTH = 3.5
MAX_STEP_DISPLACEMENT = 5.0
BACKGROUND_DEPTH = 100.0
SCHEMA_VERSION = 1

CLASSES = ("car", "pedestrian", "cyclist")
CLASS_SIZES = {0: (4.5, 1.9, 1.6), 1: (0.8, 0.8, 1.8), 2: (1.8, 0.7, 1.6)}
BEHAVIORS = ("straight", "left-turn", "right-turn", "stop", "yield")
EGO_HALF_EXTENTS = (2.04, 0.92)

# lane id -> (lateral offset y, direction along x)
MAIN_LANES = {0: (0.0, 1.0), 1: (3.5, 1.0), 2: (7.0, -1.0), 3: (10.5, -1.0)}
ROAD_EDGES = (-1.75, 12.25)
SIDEWALKS = {-1: (-4.0, 1.0), -2: (15.0, -1.0)}
CROSS_HALF_WIDTH = 7.0


@dataclass
class Agent:
    agent_id: int
    cls: int
    behavior: str
    size: tuple[float, float, float]
    poses: np.ndarray  # (duration, 5): x, y, z, yaw, speed

    def box(self, step: int) -> Box3D:
        x, y, z, yaw, _ = self.poses[step]
        return Box3D((x, y, z), self.size, yaw, self.cls, 1.0)

    def footprint(self, step: int) -> OrientedBox2D:
        x, y, _, yaw, _ = self.poses[step]
        return OrientedBox2D((x, y), (self.size[0] / 2, self.size[1] / 2), yaw)


@dataclass
class MapData:
    drivable: list[np.ndarray] = field(default_factory=list)  # polygons (n, 2)
    lanes: dict[int, np.ndarray] = field(default_factory=dict)  # centerlines, ordered along travel
    edges: list[np.ndarray] = field(default_factory=list)
    signs: list[tuple[int, float, float]] = field(default_factory=list)
    lights: list[tuple[int, float, float]] = field(default_factory=list)
    obstacles: list[OrientedBox2D] = field(default_factory=list)


@dataclass
class Scenario:
    scenario_id: str
    seed: int
    ego: np.ndarray  # (duration, 4): x, y, yaw, speed
    ego_behavior: str
    agents: list[Agent]
    map: MapData
    current: int = HISTORY
    period: float = PERIOD
    weather: str = "clear"
    annotations: list[tuple[int, str, str]] = field(default_factory=list)

    @property
    def duration(self) -> int:
        return len(self.ego)

    def ego_pose(self, step: int) -> tuple[float, float, float]:
        x, y, yaw, _ = self.ego[step]
        return float(x), float(y), float(yaw)

    def to_ego(self, pts, step: int) -> np.ndarray:
        x, y, yaw = self.ego_pose(step)
        R = rot_z(-yaw)[:2, :2]
        return (np.atleast_2d(np.asarray(pts, float)) - [x, y]) @ R.T

    def ego_future(self) -> np.ndarray:
        return self.ego[self.current + 1:, :2].copy()

    def agent_future(self, agent: Agent, horizon: int) -> np.ndarray:
        return agent.poses[self.current + 1:self.current + 1 + horizon, :2].copy()


@dataclass
class ScenarioSpec:
    n_agents: int = 4
    max_static: int = 2
    p_intersection: float = 0.6
    p_static: float = 0.4
    ego_behaviors: tuple[str, ...] = BEHAVIORS
    agent_behaviors: tuple[str, ...] = BEHAVIORS
    history: int = HISTORY
    future: int = FUTURE

    def __post_init__(self):
        if self.n_agents < 0 or self.max_static < 0:
            raise ContractViolation("agent counts must be non-negative")


# paths ---------------------------------------------------------------------------

@dataclass
class _Path:
    """Straight run, optional 90 degree arc, straight exit; parametrized by arc length."""

    start: np.ndarray  # point where s = 0
    heading: float
    arc_start: float = math.inf  # arc length where the turn begins
    radius: float = 0.0
    turn: int = 0  # +1 left, -1 right, 0 none

    def at(self, s: float) -> tuple[float, float, float]:
        h = np.array([math.cos(self.heading), math.sin(self.heading)])
        if self.turn == 0 or s <= self.arc_start:
            p = self.start + s * h
            return float(p[0]), float(p[1]), self.heading
        n = np.array([-h[1], h[0]]) * self.turn
        entry = self.start + self.arc_start * h
        center = entry + self.radius * n
        arc_len = self.radius * math.pi / 2
        ds = s - self.arc_start
        phi = min(ds, arc_len) / self.radius
        rel = entry - center
        c, si = math.cos(self.turn * phi), math.sin(self.turn * phi)
        p = center + np.array([c * rel[0] - si * rel[1], si * rel[0] + c * rel[1]])
        yaw = self.heading + self.turn * phi
        if ds > arc_len:
            d = np.array([math.cos(yaw), math.sin(yaw)])
            p = p + (ds - arc_len) * d
        return float(p[0]), float(p[1]), normalize_angle(yaw)


def _speed_profile(behavior: str, v0: float, n_steps: int, current: int, rng) -> np.ndarray:
    """Speed at each step; constant up to ``current``, then per behavior."""
    v = np.full(n_steps, v0)
    t = (np.arange(n_steps) - current) * PERIOD
    if behavior == "stop":
        decel = rng.uniform(1.5, 3.0)
        v = np.where(t > 0, np.maximum(v0 - decel * t, 0.0), v0)
    elif behavior == "yield":
        decel = rng.uniform(1.0, 2.0)
        v = np.where(t > 0, np.maximum(v0 - decel * t, 0.4 * v0), v0)
    return v


def _arc_lengths(v: np.ndarray, current: int) -> np.ndarray:
    s = np.zeros(len(v))
    for i in range(current + 1, len(v)):
        s[i] = s[i - 1] + 0.5 * (v[i - 1] + v[i]) * PERIOD
    for i in range(current - 1, -1, -1):
        s[i] = s[i + 1] - 0.5 * (v[i] + v[i + 1]) * PERIOD
    return s


def _rollout(path: _Path, behavior: str, v0: float, n: int, current: int, rng) -> np.ndarray:
    v = _speed_profile(behavior, v0, n, current, rng)
    s = _arc_lengths(v, current)
    out = np.zeros((n, 4))
    for i in range(n):
        x, y, yaw = path.at(s[i])
        out[i] = (x, y, yaw, v[i])
    return out


def _turn_path(start, heading, behavior, entry_s) -> _Path:
    if behavior == "left-turn":
        return _Path(np.asarray(start, float), heading, entry_s, 8.75, +1)
    if behavior == "right-turn":
        return _Path(np.asarray(start, float), heading, entry_s, 5.25, -1)
    return _Path(np.asarray(start, float), heading)


# generation ------------------------------------------------------------------------

def _build_map(rng, intersection_x: float | None) -> MapData:
    m = MapData()
    m.drivable.append(np.array([[-60.0, ROAD_EDGES[0]], [60.0, ROAD_EDGES[0]],
                                [60.0, ROAD_EDGES[1]], [-60.0, ROAD_EDGES[1]]]))
    xs = np.linspace(-10.0, 50.0, 5)
    for lane, (y, direction) in MAIN_LANES.items():
        pts = np.stack([xs, np.full_like(xs, y)], axis=1)
        m.lanes[lane] = pts if direction > 0 else pts[::-1].copy()
    for y in ROAD_EDGES:
        m.edges.append(np.stack([xs, np.full_like(xs, y)], axis=1))
    if intersection_x is not None:
        xi = intersection_x
        m.drivable.append(np.array([[xi - CROSS_HALF_WIDTH, -60.0], [xi + CROSS_HALF_WIDTH, -60.0],
                                    [xi + CROSS_HALF_WIDTH, 60.0], [xi - CROSS_HALF_WIDTH, 60.0]]))
        ys = np.linspace(-30.0, 30.0, 5)
        m.lanes[4] = np.stack([np.full_like(ys, xi - 1.75), ys[::-1]], axis=1)  # heading -y
        m.lanes[5] = np.stack([np.full_like(ys, xi + 1.75), ys], axis=1)  # heading +y
        m.lights.append((100, xi - CROSS_HALF_WIDTH - 1.0, -3.0))
        m.lights.append((101, xi + CROSS_HALF_WIDTH + 1.0, 14.0))
    for k in range(int(rng.integers(0, 3))):
        m.signs.append((200 + k, float(rng.uniform(5.0, 45.0)), float(rng.choice([-3.0, 14.0]))))
    return m


def _ego_track(rng, spec: ScenarioSpec, intersection_x: float | None) -> tuple[str, np.ndarray]:
    options = [b for b in spec.ego_behaviors if intersection_x is not None or "turn" not in b]
    behavior = str(rng.choice(options))
    n = spec.history + 1 + spec.future
    if "turn" in behavior:
        v0 = rng.uniform(3.0, 6.0)
    else:
        v0 = rng.uniform(3.0, 9.0)
    entry = (intersection_x - CROSS_HALF_WIDTH) if intersection_x is not None else math.inf
    path = _turn_path((0.0, 0.0), 0.0, behavior, entry)
    return behavior, _rollout(path, behavior, v0, n, spec.history, rng)


def _agent_track(rng, spec: ScenarioSpec, intersection_x: float | None, agent_id: int) -> Agent:
    n = spec.history + 1 + spec.future
    cls = int(rng.choice([0, 0, 0, 1, 2]))
    size = tuple(float(s * rng.uniform(0.9, 1.1)) for s in CLASS_SIZES[cls])
    if cls == 1:
        lane = int(rng.choice(list(SIDEWALKS)))
        y, direction = SIDEWALKS[lane]
        behavior = str(rng.choice(["straight", "stop"]))
        v0 = rng.uniform(0.8, 1.6)
        x0 = rng.uniform(2.0, 40.0)
        path = _Path(np.array([x0, y]), 0.0 if direction > 0 else math.pi)
    else:
        lane = int(rng.choice(list(MAIN_LANES)))
        y, direction = MAIN_LANES[lane]
        behaviors = [b for b in spec.agent_behaviors if intersection_x is not None or "turn" not in b]
        behavior = str(rng.choice(behaviors))
        v0 = rng.uniform(2.0, 8.0) if cls == 0 else rng.uniform(2.0, 5.0)
        heading = 0.0 if direction > 0 else math.pi
        x0 = rng.uniform(8.0, 45.0)
        if intersection_x is None:
            entry = math.inf
        elif direction > 0:
            entry = intersection_x - CROSS_HALF_WIDTH - x0
        else:
            entry = x0 - (intersection_x + CROSS_HALF_WIDTH)
        if entry < 0:
            entry = math.inf
        path = _turn_path((x0, y), heading, behavior, entry)
    track = _rollout(path, behavior, v0, n, spec.history, rng)
    poses = np.column_stack([track[:, 0], track[:, 1], np.full(n, size[2] / 2), track[:, 2], track[:, 3]])
    return Agent(agent_id, cls, behavior, size, poses)


def _ego_footprint(ego_row) -> OrientedBox2D:
    return OrientedBox2D((ego_row[0], ego_row[1]), EGO_HALF_EXTENTS, ego_row[2])


def _inflate(box: OrientedBox2D, margin: float) -> OrientedBox2D:
    return OrientedBox2D(box.center, (box.half_extents[0] + margin, box.half_extents[1] + margin), box.yaw)


def _in_volume(x: float, y: float, z: float = 0.0) -> bool:
    return abs(x) <= SCENE_HALF and abs(y) <= SCENE_HALF and abs(z) <= SCENE_HALF_Z


def generate_scenario(seed: int, spec: ScenarioSpec | None = None, scenario_id: str | None = None) -> Scenario:
    """Deterministic scenario for ``seed``. Agents never touch the ego's
    ground-truth footprint (with a 1 m margin) or each other."""
    spec = spec or ScenarioSpec()
    rng = np.random.default_rng(seed)
    intersection_x = float(rng.uniform(18.0, 30.0)) if rng.random() < spec.p_intersection else None
    m = _build_map(rng, intersection_x)
    ego_behavior, ego = _ego_track(rng, spec, intersection_x)
    ego_boxes = [_inflate(_ego_footprint(r), 1.0) for r in ego]
    n = len(ego)

    agents: list[Agent] = []
    for k in range(spec.n_agents):
        for _ in range(200):
            cand = _agent_track(rng, spec, intersection_x, k + 1)
            if not all(_in_volume(*p[:3]) for p in cand.poses):
                continue
            steps = np.diff(cand.poses[:, :2], axis=0)
            if np.any(np.hypot(steps[:, 0], steps[:, 1]) > MAX_STEP_DISPLACEMENT):
                continue
            if any(boxes_intersect(ego_boxes[t], cand.footprint(t)) for t in range(n)):
                continue
            if any(boxes_intersect(_inflate(a.footprint(t), 0.5), cand.footprint(t))
                   for a in agents for t in range(n)):
                continue
            agents.append(cand)
            break

    if rng.random() < spec.p_static:
        for _ in range(int(rng.integers(1, spec.max_static + 1)) if spec.max_static else 0):
            for _ in range(100):
                half = float(rng.uniform(0.2, 0.6))
                box = OrientedBox2D((rng.uniform(6.0, 40.0), rng.choice([3.5, 7.0, -1.2])),
                                    (half, half), rng.uniform(-0.5, 0.5))
                if any(boxes_intersect(_inflate(box, 0.3), eb) for eb in ego_boxes):
                    continue
                if any(boxes_intersect(_inflate(box, 0.3), a.footprint(t)) for a in agents for t in range(n)):
                    continue
                m.obstacles.append(box)
                break

    weather = str(rng.choice(["clear", "rain", "overcast", "night"]))
    return Scenario(scenario_id or f"s{seed:05d}", int(seed), ego, ego_behavior, agents, m,
                    current=spec.history, weather=weather)


def check_scenario(sc: Scenario) -> list[str]:
    """Human-readable invariant violations (empty when the scenario is valid)."""
    problems = []
    for a in sc.agents:
        steps = np.diff(a.poses[:, :2], axis=0)
        if len(steps) and np.hypot(steps[:, 0], steps[:, 1]).max() > MAX_STEP_DISPLACEMENT + 1e-9:
            problems.append(f"agent {a.agent_id} jumps more than {MAX_STEP_DISPLACEMENT} m in one step")
        if not all(_in_volume(*p[:3]) for p in a.poses):
            problems.append(f"agent {a.agent_id} leaves the scene volume")
    return problems


def transform_scenario(sc: Scenario, dx: float, dy: float, dyaw: float) -> Scenario:
    """Apply one rigid planar motion to everything in the scenario."""
    R = rot_z(dyaw)[:2, :2]

    def pts(a):
        return np.atleast_2d(np.asarray(a, float)) @ R.T + [dx, dy]

    ego = sc.ego.copy()
    ego[:, :2] = pts(ego[:, :2])
    ego[:, 2] = [normalize_angle(y + dyaw) for y in ego[:, 2]]
    agents = []
    for a in sc.agents:
        poses = a.poses.copy()
        poses[:, :2] = pts(poses[:, :2])
        poses[:, 3] = [normalize_angle(y + dyaw) for y in poses[:, 3]]
        agents.append(Agent(a.agent_id, a.cls, a.behavior, a.size, poses))
    m = MapData(
        drivable=[pts(p) for p in sc.map.drivable],
        lanes={k: pts(v) for k, v in sc.map.lanes.items()},
        edges=[pts(e) for e in sc.map.edges],
        signs=[(i, *pts([x, y])[0]) for i, x, y in sc.map.signs],
        lights=[(i, *pts([x, y])[0]) for i, x, y in sc.map.lights],
        obstacles=[OrientedBox2D(tuple(pts(b.center)[0]), b.half_extents, b.yaw + dyaw) for b in sc.map.obstacles],
    )
    return Scenario(sc.scenario_id, sc.seed, ego, sc.ego_behavior, agents, m, sc.current, sc.period,
                    sc.weather, list(sc.annotations))


# rendering --------------------------------------------------------------------------

@dataclass(frozen=True)
class RigConfig:
    n_views: int = 3
    width: int = 128
    height: int = 64
    fx: float = 64.0
    fy: float = 64.0
    mount_height: float = 1.5
    channels: int = 8

    def yaws(self) -> list[float]:
        if self.n_views == 3:
            return [0.0, math.radians(60), math.radians(-60)]
        if self.n_views == 6:
            return [math.radians(a) for a in (0, 60, -60, 180, 120, -120)]
        return [2 * math.pi * k / self.n_views for k in range(self.n_views)]

    def cameras(self) -> list[Camera]:
        return [Camera.mounted(y, (0.0, 0.0, self.mount_height), self.fx, self.fy,
                               (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height)
                for y in self.yaws()]


@dataclass
class CameraRig:
    cameras: list[Camera]
    feature_maps: list[np.ndarray]  # (C, H, W)
    depth_maps: list[np.ndarray]  # (H, W)
    visible: np.ndarray | None = None  # (agents, views): center neighbourhood unoccluded

    def __len__(self) -> int:
        return len(self.cameras)


def agent_feature(agent: Agent, step: int, ego_yaw: float) -> np.ndarray:
    x, y, z, yaw, speed = agent.poses[step]
    rel = normalize_angle(yaw - ego_yaw)
    vec = np.zeros(8)
    vec[agent.cls] = 1.0
    vec[3], vec[4] = math.cos(rel), math.sin(rel)
    vec[5] = speed / 10.0
    vec[6] = {"left-turn": 1.0, "right-turn": -1.0}.get(agent.behavior, 0.0)
    vec[7] = 1.0 if agent.behavior in ("stop", "yield") else 0.0
    return vec


def _apparent_half_width(agent: Agent, step: int, viewpoint) -> float:
    """Half the footprint extent seen across the line of sight."""
    x, y, _, yaw, _ = agent.poses[step]
    phi = math.atan2(y - viewpoint[1], x - viewpoint[0]) - yaw
    length, width = agent.size[0], agent.size[1]
    return 0.5 * (length * abs(math.sin(phi)) + width * abs(math.cos(phi)))


def render_views(sc: Scenario, frame: int, rig: RigConfig | None = None) -> CameraRig:
    """Splat one Gaussian blob per agent into each view, far to near.

    The blob radius is the apparent half-width divided by depth (in pixels).
    Features carry the full descriptor over the blob core and fade outside it,
    so sampling at a projected center reads the descriptor unscaled. Depth maps hold the Euclidean range from the camera center under each
    blob core; all cameras share one center, so every view agrees on an
    agent's range.
    """
    if not 0 <= frame < sc.duration:
        raise ContractViolation(f"frame {frame} outside [0, {sc.duration})")
    rig = rig or RigConfig()
    ex, ey, eyaw = sc.ego_pose(frame)
    cams = [c.at_pose(ex, ey, eyaw) for c in rig.cameras()]
    vv, uu = np.mgrid[0:rig.height, 0:rig.width]
    fmaps, dmaps = [], []
    visible = np.zeros((len(sc.agents), len(cams)), dtype=bool)
    for m, cam in enumerate(cams):
        fmap = np.zeros((rig.channels, rig.height, rig.width))
        dmap = np.full((rig.height, rig.width), BACKGROUND_DEPTH)
        owner = np.full((rig.height, rig.width), -1)
        center = cam.center
        blobs = []
        for idx, a in enumerate(sc.agents):
            p = a.poses[frame, :3]
            u, v, depth, _ = project(cam, p)
            if depth <= 0.1:
                continue
            radius = max(cam.intrinsics[0, 0] * _apparent_half_width(a, frame, center) / depth, 1.0)
            if u < -3 * radius or u > rig.width - 1 + 3 * radius or v < -3 * radius or v > rig.height - 1 + 3 * radius:
                continue
            blobs.append((float(np.linalg.norm(p - center)), u, v, radius, idx))
        for rng_, u, v, radius, idx in sorted(blobs, key=lambda b: -b[0]):
            a = sc.agents[idx]
            w = np.exp(-((uu - u) ** 2 + (vv - v) ** 2) / radius ** 2)
            mask = w > 0.25
            core = w > 0.5
            if 0 <= u <= rig.width - 1 and 0 <= v <= rig.height - 1:
                # the 2x2 neighbourhood used by bilinear sampling at the center
                rows = slice(int(math.floor(v)), int(math.floor(v)) + 2)
                cols = slice(int(math.floor(u)), int(math.floor(u)) + 2)
                core[rows, cols] = mask[rows, cols] = True
            vec = agent_feature(a, frame, eyaw)[: rig.channels]
            amp = np.where(core, 1.0, w / 0.5)
            fmap[:, mask] = vec[:, None] * amp[mask]
            dmap[core] = rng_
            owner[mask] = idx
        for rng_, u, v, radius, idx in blobs:
            if 0 <= u <= rig.width - 1 and 0 <= v <= rig.height - 1:
                r0, c0 = int(math.floor(v)), int(math.floor(u))
                visible[idx, m] = bool(np.all(owner[r0:r0 + 2, c0:c0 + 2] == idx))
        fmaps.append(fmap)
        dmaps.append(dmap)
    return CameraRig(cams, fmaps, dmaps, visible)


# knowledge mining ---------------------------------------------------------------------

# (longitudinal bound, lateral bound) per zone; "ahead" means lon >= 0
DYNAMIC_NEAR = ((15.0, 20.0), (15.0, 20.0))  # (ahead, behind)
DYNAMIC_FAR = ((30.0, 50.0), (30.0, 30.0))
SIGN_ZONE = (30.0, 30.0)
LIGHT_ZONE = (30.0, 50.0)


def in_zone(lon: float, lat: float, ahead: tuple[float, float] | None,
            behind: tuple[float, float] | None = None) -> bool:
    """Longitudinal bound on the signed forward distance plus a lateral bound."""
    if lon >= 0:
        return ahead is not None and lon <= ahead[0] and abs(lat) <= ahead[1]
    return behind is not None and -lon <= behind[0] and abs(lat) <= behind[1]


def _lane_of(sc: Scenario, x: float, y: float) -> int | None:
    best, best_d = None, LANE_WIDTH / 2
    for lane, line in sc.map.lanes.items():
        for a, b in zip(line[:-1], line[1:]):
            ab = b - a
            t = np.clip(np.dot([x, y] - a, ab) / np.dot(ab, ab), 0.0, 1.0)
            d = float(np.linalg.norm([x, y] - (a + t * ab)))
            if d <= best_d:
                best, best_d = lane, d
    return best


@dataclass
class MinedKnowledge:
    dynamic: list[int]
    signs: list[int]
    lights: list[int]


def mine_knowledge(sc: Scenario, frame: int) -> MinedKnowledge:
    dynamic: set[int] = set()
    closest: dict[int, tuple[float, int]] = {}
    for a in sc.agents:
        lon, lat = sc.to_ego(a.poses[frame, :2], frame)[0]
        if in_zone(lon, lat, *DYNAMIC_NEAR) or in_zone(lon, lat, *DYNAMIC_FAR):
            dynamic.add(a.agent_id)
        lane = _lane_of(sc, *a.poses[frame, :2])
        if lane is not None and abs(lon) <= SCENE_HALF and abs(lat) <= SCENE_HALF:
            d = math.hypot(lon, lat)
            if lane not in closest or d < closest[lane][0]:
                closest[lane] = (d, a.agent_id)
    # the nearest target of every lane inside the scene volume is always kept
    dynamic.update(aid for _, aid in closest.values())

    def pick(items, zone):
        out = []
        for oid, x, y in items:
            lon, lat = sc.to_ego([x, y], frame)[0]
            if in_zone(lon, lat, zone):
                out.append(oid)
        return sorted(out)

    return MinedKnowledge(sorted(dynamic), pick(sc.map.signs, SIGN_ZONE), pick(sc.map.lights, LIGHT_ZONE))


# annotation stub and text embedding ---------------------------------------------------

@dataclass
class Annotation:
    text: str
    selected: list[int]
    provenance: dict[int, list[int]]  # object id -> indices of views it is visible in


class Annotator(Protocol):
    def __call__(self, sc: Scenario, frame: int, prompt: str) -> Annotation: ...


def _distance_bucket(d: float) -> str:
    for hi in (10, 20, 30):
        if d < hi:
            return f"{hi - 10}-{hi}m"
    return "beyond-30m"


def _bearing(lon: float, lat: float) -> str:
    ang = math.degrees(math.atan2(lat, lon))
    if -22.5 <= ang <= 22.5:
        return "ahead"
    if 22.5 < ang <= 67.5:
        return "ahead-left"
    if -67.5 <= ang < -22.5:
        return "ahead-right"
    if 67.5 < ang <= 112.5:
        return "left"
    if -112.5 <= ang < -67.5:
        return "right"
    return "behind"


def annotate(sc: Scenario, frame: int, prompt: str = "describe", history: int = HISTORY,
             rig: RigConfig | None = None) -> Annotation:
    """Template scene description over the last ``history`` steps."""
    if frame < history - 1 or frame >= sc.duration:
        raise ContractViolation(f"frame {frame} needs {history - 1} earlier steps")
    rig = rig or RigConfig()
    mined = mine_knowledge(sc, frame)
    ex, ey, eyaw = sc.ego_pose(frame)
    cams = [c.at_pose(ex, ey, eyaw) for c in rig.cameras()]
    hazard = "attention" in prompt.lower()
    by_id = {a.agent_id: a for a in sc.agents}
    phrases, provenance = [], {}
    for aid in mined.dynamic:
        a = by_id[aid]
        lon, lat = sc.to_ego(a.poses[frame, :2], frame)[0]
        then = sc.to_ego(a.poses[frame - history + 1, :2], frame - history + 1)[0]
        trend = "approaching" if math.hypot(lon, lat) < math.hypot(*then) - 0.5 else "steady"
        provenance[aid] = [m for m, c in enumerate(cams) if project(c, a.poses[frame, :3])[3]]
        words = [CLASSES[a.cls], _bearing(lon, lat), _distance_bucket(math.hypot(lon, lat)), a.behavior, trend]
        if hazard and (a.cls == 1 or trend == "approaching"):
            words.insert(0, "caution")
        phrases.append(" ".join(words))
    for kind, ids, items in (("sign", mined.signs, sc.map.signs), ("light", mined.lights, sc.map.lights)):
        where = {i: (x, y) for i, x, y in items}
        for oid in ids:
            lon, lat = sc.to_ego(where[oid], frame)[0]
            phrases.append(f"{kind} {_bearing(lon, lat)} {_distance_bucket(math.hypot(lon, lat))}")
            provenance[oid] = [m for m, c in enumerate(cams)
                               if project(c, (*where[oid], 2.0))[3]]
    if not phrases:
        text = "clear scene"
    else:
        lead = "attend to " if hazard else "scene with "
        text = lead + "; ".join(phrases)
    return Annotation(text, mined.dynamic + mined.signs + mined.lights, provenance)


_TOKEN = re.compile(r"[a-z0-9\-]+")


def embed_text(text: str, d_text: int) -> np.ndarray:
    """Signed hashed bag of tokens, L2-normalized."""
    if d_text < 1:
        raise ContractViolation("text embedding width must be >= 1")
    vec = np.zeros(d_text)
    for tok in _TOKEN.findall(text.lower()):
        h = hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest()
        idx = int.from_bytes(h[:4], "little") % d_text
        vec[idx] += 1.0 if h[4] & 1 else -1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


TextEncoder = Callable[[str, int], np.ndarray]


# scenario files --------------------------------------------------------------------------

def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def dumps_scenario(sc: Scenario) -> str:
    lines = [f"# omniscene scenario schema v{SCHEMA_VERSION}", "[meta]",
             f"version = {SCHEMA_VERSION}", f"id = {sc.scenario_id}", f"seed = {sc.seed}",
             f"duration = {sc.duration}", f"current = {sc.current}", f"period = {sc.period!r}",
             f"weather = {sc.weather}", f"ego_behavior = {sc.ego_behavior}", "[map]"]
    for poly in sc.map.drivable:
        lines.append(f"drivable {_fmt(poly.reshape(-1))}")
    for lane, line in sc.map.lanes.items():
        lines.append(f"lane {lane} {_fmt(line.reshape(-1))}")
    for edge in sc.map.edges:
        lines.append(f"edge {_fmt(edge.reshape(-1))}")
    for oid, x, y in sc.map.signs:
        lines.append(f"sign {oid} {_fmt((x, y))}")
    for oid, x, y in sc.map.lights:
        lines.append(f"light {oid} {_fmt((x, y))}")
    for b in sc.map.obstacles:
        lines.append(f"obstacle {_fmt((*b.center, *b.half_extents, b.yaw))}")
    lines.append("[agents]")
    for step, row in enumerate(sc.ego):
        lines.append(f"ego {step} {_fmt(row)}")
    for a in sc.agents:
        lines.append(f"agent {a.agent_id} {a.cls} {a.behavior} {_fmt(a.size)}")
        for step, row in enumerate(a.poses):
            lines.append(f"pose {a.agent_id} {step} {_fmt(row)}")
    lines.append("[annotations]")
    for frame, prompt, text in sc.annotations:
        lines.append(f"{frame}\t{prompt}\t{text}")
    return "\n".join(lines) + "\n"


def loads_scenario(text: str) -> Scenario:
    section, meta = None, {}
    m = MapData()
    ego_rows: dict[int, list[float]] = {}
    agents: dict[int, dict] = {}
    notes = []
    for raw in text.splitlines():
        line = raw.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            continue
        if section == "meta":
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
        elif section == "map":
            kind, *rest = line.split()
            if kind == "drivable":
                m.drivable.append(np.array([float(v) for v in rest]).reshape(-1, 2))
            elif kind == "lane":
                m.lanes[int(rest[0])] = np.array([float(v) for v in rest[1:]]).reshape(-1, 2)
            elif kind == "edge":
                m.edges.append(np.array([float(v) for v in rest]).reshape(-1, 2))
            elif kind in ("sign", "light"):
                getattr(m, kind + "s").append((int(rest[0]), float(rest[1]), float(rest[2])))
            elif kind == "obstacle":
                cx, cy, hx, hy, yaw = (float(v) for v in rest)
                m.obstacles.append(OrientedBox2D((cx, cy), (hx, hy), yaw))
            else:
                raise ContractViolation(f"unknown map record {kind!r}")
        elif section == "agents":
            kind, *rest = line.split()
            if kind == "ego":
                ego_rows[int(rest[0])] = [float(v) for v in rest[1:]]
            elif kind == "agent":
                agents[int(rest[0])] = {"cls": int(rest[1]), "behavior": rest[2],
                                        "size": tuple(float(v) for v in rest[3:6]), "poses": {}}
            elif kind == "pose":
                agents[int(rest[0])]["poses"][int(rest[1])] = [float(v) for v in rest[2:]]
            else:
                raise ContractViolation(f"unknown agent record {kind!r}")
        elif section == "annotations":
            frame, prompt, note = line.split("\t", 2)
            notes.append((int(frame), prompt, note))
        else:
            raise ContractViolation(f"record outside a known section: {line!r}")
    if int(meta.get("version", -1)) != SCHEMA_VERSION:
        raise ContractViolation(f"unsupported scenario schema {meta.get('version')}")
    ego = np.array([ego_rows[i] for i in sorted(ego_rows)])
    agent_list = [Agent(aid, d["cls"], d["behavior"], d["size"],
                        np.array([d["poses"][i] for i in sorted(d["poses"])]))
                  for aid, d in agents.items()]
    return Scenario(meta["id"], int(meta["seed"]), ego, meta["ego_behavior"], agent_list, m,
                    int(meta["current"]), float(meta["period"]), meta["weather"], notes)


def save_scenario(path, sc: Scenario) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_scenario(sc))


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return loads_scenario(fh.read())
