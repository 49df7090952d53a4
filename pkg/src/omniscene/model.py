"""End-to-end toy model: detection, map, tracked-instance fusion, motion and
planning heads, plus training and evaluation loops.

Motion and planning run on tracked instances whose boxes come from the
scenario's ground-truth tracks (a given-tracks protocol); every feature they
see is read from the rendered views and the annotation text.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .fusion import (AttentionParams, DeformableParams, TextFusionParams, deformable_aggregate, fuse_vision,
                     refine_depth, spatial_self_attention, temporal_cross_attention, text_conditional_aggregate)
from .geometry import OrientedBox2D, project_tensor, sample_points, trajectory_yaws
from .instance_init import QuerySet, aggregate_views, fuse_query, pph_forward, sample_multiview, PPH_WIDTH
from .losses import LossWeights, planning_loss, motion_loss, set_loss, total_loss, FOCAL_ALPHA, FOCAL_GAMMA
from .metrics import ObstacleTimeline, PlanEvalConfig, collision_flags, min_ade_fde, planning_l2
from .numeric import (Adam, Mlp, Tensor, concat, matmul, mlp_forward, named_parameters, sigmoid, stack, tabs,
                      take, tsum, backward)
from .planner import (AnchorSet, DynamicAgent, TrajectorySet, UtilityWeights, WorldModel, cluster_anchors,
                      feasible, select)
from .simulator import (BACKGROUND_DEPTH, RigConfig, Scenario, annotate, embed_text, render_views)

MAP_SCALE = 20.0
CENTER_SCALE = 5.0
MAP_CLASSES = 2


@dataclass(frozen=True)
class ModelConfig:
    d: int = 8
    d_text: int = 16
    n_init: int = 32
    n_views: int = 3
    n_points: int = 4
    channels: int = 8
    history: int = 3
    motion_modes: int = 6
    plan_modes: int = 6
    motion_horizon: int = 4
    plan_horizon: int = 6
    tau: float = 0.3
    n_map: int = 8
    map_points: int = 5
    hidden: int = 32
    prompt: str = "describe"
    use_text: bool = True

    def __post_init__(self):
        for name in ("d", "d_text", "n_init", "n_views", "n_points", "channels", "motion_modes", "plan_modes",
                     "motion_horizon", "plan_horizon", "n_map", "map_points", "hidden"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if self.history < 0:
            raise ContractViolation("history must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            raise ContractViolation("tau must lie in [0, 1]")


# samples ---------------------------------------------------------------------------------------

@dataclass
class Sample:
    """Everything a forward pass needs from one scenario at its current step."""

    scenario: Scenario
    rig: object  # CameraRig at the current step
    text: np.ndarray
    text_str: str
    track_feats: np.ndarray  # (A, history+1, C) aggregated samples, slot 0 = current
    positions: np.ndarray  # (A, 3) at the current step
    yaws: np.ndarray  # (A,) track headings in the ego frame
    prev_range: np.ndarray  # (A,) range from the camera center one step earlier
    depth_vals: np.ndarray  # (A, M) depth-map values at the current projections
    depth_ok: np.ndarray  # (A, M)
    motion_gt: np.ndarray  # (A, Tm, 2) displacements in the ego frame
    visible: np.ndarray  # (A,) own features readable in at least one view; motion is scored on these
    det_cls: np.ndarray
    det_params: np.ndarray  # (A, 7)
    map_cls: np.ndarray
    map_params: np.ndarray  # (G, 2P)
    ego_status: np.ndarray  # (3,) inputs: speed/10, yaw rate, 1
    status_gt: np.ndarray  # (2,) next speed, next yaw rate
    plan_gt: np.ndarray  # (Tp, 2)


def _rates(ego: np.ndarray, step: int, period: float) -> tuple[float, float]:
    yaw_rate = (ego[step, 2] - ego[step - 1, 2]) / period if step > 0 else 0.0
    return float(ego[step, 3]), float(math.remainder(yaw_rate * period, 2 * math.pi) / period)


def build_sample(sc: Scenario, cfg: ModelConfig, rig_cfg: RigConfig | None = None) -> Sample:
    rig_cfg = rig_cfg or RigConfig(n_views=cfg.n_views, channels=cfg.channels)
    t = sc.current
    if t < cfg.history or t + max(cfg.motion_horizon, cfg.plan_horizon) >= sc.duration:
        raise ContractViolation("scenario too short for the configured history and horizons")
    rigs = [render_views(sc, t - k, rig_cfg) for k in range(cfg.history + 1)]
    cur = rigs[0]
    A = len(sc.agents)
    C = cfg.channels
    track = np.zeros((A, cfg.history + 1, C))
    for k, rig in enumerate(rigs):
        if A:
            pos = np.array([a.poses[t - k, :3] for a in sc.agents])
            s, m = sample_multiview(pos, rig.cameras, rig.feature_maps)
            track[:, k] = aggregate_views(s, m).data
    positions = np.array([a.poses[t, :3] for a in sc.agents]).reshape(A, 3)
    center = cur.cameras[0].center
    prev = np.array([a.poses[t - 1, :3] for a in sc.agents]).reshape(A, 3)
    prev_range = np.linalg.norm(prev - center, axis=1)
    vals = np.zeros((A, cfg.n_views))
    ok = np.zeros((A, cfg.n_views), dtype=bool)
    for m, (cam, dmap) in enumerate(zip(cur.cameras, cur.depth_maps)):
        if A:
            uv, _, front = project_tensor(cam, positions)
            u, v = uv.data[:, 0], uv.data[:, 1]
            ok[:, m] = front & (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
            vals[:, m] = np.where(ok[:, m], sample_points(dmap[None], uv).data[:, 0], 0.0)
    ego_local = lambda pts: sc.to_ego(pts, t)
    motion_gt = np.array([ego_local(a.poses[t + 1:t + 1 + cfg.motion_horizon, :2]) for a in sc.agents])
    motion_gt = motion_gt.reshape(A, cfg.motion_horizon, 2)
    det_params = np.array([[*a.poses[t, :3], *a.size, a.poses[t, 3]] for a in sc.agents]).reshape(A, 7)
    map_elems, map_cls = [], []
    for lane in sorted(sc.map.lanes):
        map_elems.append(_resample(ego_local(sc.map.lanes[lane]), cfg.map_points))
        map_cls.append(0)
    for edge in sc.map.edges:
        map_elems.append(_resample(ego_local(edge), cfg.map_points))
        map_cls.append(1)
    speed, yaw_rate = _rates(sc.ego, t, sc.period)
    nspeed, nyaw = _rates(sc.ego, t + 1, sc.period)
    note = annotate(sc, t, cfg.prompt, history=cfg.history)
    return Sample(
        scenario=sc, rig=cur, text=embed_text(note.text, cfg.d_text), text_str=note.text,
        track_feats=track, positions=positions,
        yaws=np.array([a.poses[t, 3] - sc.ego[t, 2] for a in sc.agents]).reshape(A), prev_range=prev_range, depth_vals=vals, depth_ok=ok,
        motion_gt=motion_gt - positions[:, None, :2] if A else motion_gt,
        visible=cur.visible.any(axis=1) if A else np.zeros(0, dtype=bool),
        det_cls=np.array([a.cls for a in sc.agents], dtype=int), det_params=det_params,
        map_cls=np.array(map_cls[:cfg.n_map], dtype=int),
        map_params=np.array([e.reshape(-1) for e in map_elems[:cfg.n_map]]),
        ego_status=np.array([speed / 10.0, yaw_rate, 1.0]),
        status_gt=np.array([nspeed, nyaw]),
        plan_gt=ego_local(sc.ego[t + 1:t + 1 + cfg.plan_horizon, :2]),
    )


def _resample(line: np.ndarray, n: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(line, axis=0), axis=1)
    s = np.r_[0.0, np.cumsum(seg)]
    targets = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(targets, s, line[:, 0]), np.interp(targets, s, line[:, 1])], axis=1)


# model --------------------------------------------------------------------------------------------

@dataclass
class OmniSceneModel:
    cfg: ModelConfig
    motion_anchors: np.ndarray  # (Mm, Tm, 2) displacements in each agent's heading frame
    plan_anchors: AnchorSet
    queries: QuerySet
    pph: Mlp
    track_embed: Tensor
    in_proj: Tensor  # (d, C + d)
    attention: AttentionParams
    deform: DeformableParams
    text_fusion: TextFusionParams
    depth_head: Mlp
    motion_head: Mlp
    ego_embed: Tensor
    ego_proj: Tensor  # (d, 3)
    plan_head: Mlp
    map_embed: Tensor  # (n_map, d)
    map_text: Tensor  # (d, d_T)
    map_head: Mlp

    def parameters(self) -> dict[str, Tensor]:
        skip = {"cfg", "motion_anchors", "plan_anchors"}
        return {k: v for k, v in named_parameters(self).items() if k.split(".")[0] not in skip}


def init_model(cfg: ModelConfig, motion_anchors: np.ndarray, plan_anchors: AnchorSet, seed: int) -> OmniSceneModel:
    rng = np.random.default_rng(seed)
    d, C, h = cfg.d, cfg.channels, cfg.hidden
    Mm, Tm = motion_anchors.shape[:2]
    Kp, Tp = plan_anchors.anchors.shape[:2]
    if Mm != cfg.motion_modes or Tm != cfg.motion_horizon or Kp != cfg.plan_modes or Tp != cfg.plan_horizon:
        raise ContractViolation("anchor shapes disagree with the model configuration")

    def weight(shape, fan_in):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape), requires_grad=True)

    return OmniSceneModel(
        cfg=cfg,
        motion_anchors=np.asarray(motion_anchors, float),
        plan_anchors=plan_anchors,
        queries=QuerySet.grid(cfg.n_init, d, rng),
        pph=Mlp.init([C + d, h, PPH_WIDTH], rng, last_gain=0.1),
        track_embed=Tensor(rng.normal(0.0, 0.1, d), requires_grad=True),
        in_proj=weight((d, C + d), C + d),
        attention=AttentionParams.init(d, rng),
        deform=DeformableParams.init(d, C, cfg.n_views, cfg.n_points, rng),
        text_fusion=TextFusionParams.init(2 * d, cfg.d_text, rng),
        depth_head=Mlp.init([2 * d, h, 1], rng, last_gain=0.1),
        motion_head=Mlp.init([2 * d + 2 * cfg.channels, h, Mm * Tm * 2 + Mm], rng),
        ego_embed=Tensor(rng.normal(0.0, 0.1, d), requires_grad=True),
        ego_proj=weight((d, 3), 3),
        plan_head=Mlp.init([2 * d + 3, h, Kp * Tp * 2 + Kp + 2], rng),
        map_embed=Tensor(rng.normal(0.0, 1.0, (cfg.n_map, d)), requires_grad=True),
        map_text=weight((d, cfg.d_text), cfg.d_text),
        map_head=Mlp.init([2 * d, h, 1 + MAP_CLASSES + 2 * cfg.map_points], rng, last_gain=0.1),
    )


@dataclass
class Forward:
    det: Tensor
    map: Tensor
    depth: Tensor
    motion: Tensor
    planning: Tensor
    total: Tensor
    motion_modes: np.ndarray  # (A, Mm, Tm, 2) in the ego frame, absolute
    motion_logits: np.ndarray
    plan_modes: np.ndarray  # (Kp, Tp, 2)
    plan_logits: np.ndarray
    instance_feats: np.ndarray  # (A, d) history-attended instance features
    vision_feats: np.ndarray  # (A, 2d) before text fusion
    text_feats: np.ndarray  # (A, 2d) after text fusion
    weights: dict = field(default_factory=dict)


def forward(model: OmniSceneModel, s: Sample, weights: LossWeights = LossWeights(),
            focal=(FOCAL_ALPHA, FOCAL_GAMMA), keep_weights: bool = False) -> Forward:
    cfg = model.cfg
    d = cfg.d
    rig = s.rig
    zero = Tensor(0.0)

    # detection on the sparse queries
    q = model.queries
    samples, mask = sample_multiview(q.positions, rig.cameras, rig.feature_maps)
    F = fuse_query(aggregate_views(samples, mask), q.embeddings)
    props = pph_forward(model.pph, F, q.positions)
    props.center = q.positions + (props.center - q.positions) * CENTER_SCALE
    det, _ = set_loss(props.score, props.class_logits, props.box_params(), s.det_cls, s.det_params,
                      weights.det_c, weights.det_r, *focal)

    # map elements
    t_map = matmul(model.map_text, s.text)
    map_in = concat([model.map_embed, t_map.reshape(1, d) + Tensor(np.zeros((cfg.n_map, d)))], axis=-1)
    mo = mlp_forward(model.map_head, map_in)
    map_loss, _ = set_loss(sigmoid(mo[:, 0]), mo[:, 1:1 + MAP_CLASSES], mo[:, 1 + MAP_CLASSES:] * MAP_SCALE,
                           s.map_cls, s.map_params, weights.map_c, weights.map_r, *focal)

    # tracked instances: history features, decoupled attention, vision, text
    A = len(s.positions)
    ego_tok = matmul(model.ego_proj, s.ego_status) + model.ego_embed
    kept = {}
    if A:
        T1 = cfg.history + 1
        emb = model.track_embed.reshape(1, 1, d) + Tensor(np.zeros((A, T1, d)))
        hist = matmul(concat([Tensor(s.track_feats), emb], axis=-1), model.in_proj.T)  # (A, T1, d)
        tilde, alpha = temporal_cross_attention(hist, model.attention, return_weights=True)
        tokens = concat([tilde, ego_tok.reshape(1, d)], axis=0)
    else:
        tokens = ego_tok.reshape(1, d)
    hat, beta = spatial_self_attention(tokens, model.attention, return_weights=True)
    if A:
        v, alpha_mk = deformable_aggregate(hat[:A], s.positions, rig.cameras, rig.feature_maps, model.deform,
                                           return_weights=True)
        vis = concat([fuse_vision(hat[:A], v), concat([hat[A:], Tensor(np.zeros((1, d)))], axis=-1)], axis=0)
        kept = {"alpha_ik": alpha.data, "beta_ij": beta.data, "alpha_mk": alpha_mk.data}
    else:
        vis = concat([hat, Tensor(np.zeros((1, d)))], axis=-1)
        kept = {"beta_ij": beta.data}
    text = s.text if cfg.use_text else np.zeros_like(s.text)
    fused, gate = text_conditional_aggregate(vis, text, model.text_fusion, return_gate=True)
    kept["gamma"] = gate.data

    Mm, Tm = cfg.motion_modes, cfg.motion_horizon
    if A:
        agents = fused[:A]
        d_ref = refine_depth(agents, s.prev_range, model.depth_head)
        ok = s.depth_ok.astype(float)
        per = tsum(tabs(d_ref.reshape(A, 1) - s.depth_vals) * ok, axis=1) * (1.0 / np.maximum(ok.sum(1), 1.0))
        seen = ok.sum(1) > 0
        depth = weights.depth * tsum(per) * (1.0 / max(seen.sum(), 1))
        # skip connection: the agent's own current reading and its one-step change
        own = np.concatenate([s.track_feats[:, 0], s.track_feats[:, 0] - s.track_feats[:, 1]], axis=-1)
        mh = mlp_forward(model.motion_head, concat([agents, Tensor(own)], axis=-1))
        res = mh[:, :Mm * Tm * 2].reshape(A, Mm, Tm, 2)
        # agent frame -> ego frame with the track heading
        m_modes = matmul(res + model.motion_anchors, Tensor(_rotations(s.yaws)).reshape(A, 1, 2, 2))
        m_logits = mh[:, Mm * Tm * 2:]
        seen_idx = np.flatnonzero(s.visible)
        if len(seen_idx):
            motion = motion_loss(take(m_modes, seen_idx), take(m_logits, seen_idx), s.motion_gt[seen_idx],
                                 weights, *focal)
        else:
            motion = zero
        modes_abs = m_modes.data + s.positions[:, None, None, :2]
        logits_np = m_logits.data
    else:
        depth = motion = zero
        modes_abs = np.zeros((0, Mm, Tm, 2))
        logits_np = np.zeros((0, Mm))

    Kp, Tp = cfg.plan_modes, cfg.plan_horizon
    ph = mlp_forward(model.plan_head, concat([fused[A], Tensor(s.ego_status)], axis=-1))
    p_modes = ph[:Kp * Tp * 2].reshape(Kp, Tp, 2) + model.plan_anchors.anchors
    p_logits = ph[Kp * Tp * 2:Kp * Tp * 2 + Kp]
    status = ph[Kp * Tp * 2 + Kp:]
    plan = planning_loss(p_modes, p_logits, s.plan_gt, status, s.status_gt, weights, *focal)

    total = total_loss(det, map_loss, depth, motion, plan)
    out = Forward(det, map_loss, depth, motion, plan, total, modes_abs, logits_np, p_modes.data, p_logits.data,
                  tilde.data if A else np.zeros((0, d)), vis.data[:A], fused.data[:A])
    if keep_weights:
        out.weights = kept
    return out


# anchors from data -----------------------------------------------------------------------------------

def _rotations(yaws) -> np.ndarray:
    """Row-vector rotation matrices: ``p @ R`` turns agent-frame p into the ego frame."""
    c, s = np.cos(yaws), np.sin(yaws)
    return np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], -2)


def to_agent_frame(samples: list[Sample]) -> list[np.ndarray]:
    out = []
    for s in samples:
        R = _rotations(s.yaws)
        out.extend(g @ np.swapaxes(r, -1, -2) for g, r in zip(s.motion_gt, R))
    return out


def motion_anchor_set(samples: list[Sample], cfg: ModelConfig, seed: int) -> np.ndarray:
    trajs = to_agent_frame(samples)
    if len(trajs) < cfg.motion_modes:
        trajs += [np.zeros((cfg.motion_horizon, 2))] * (cfg.motion_modes - len(trajs))
    return cluster_anchors(np.array(trajs), cfg.motion_modes, seed).anchors


def plan_anchor_set(samples: list[Sample], cfg: ModelConfig, seed: int) -> AnchorSet:
    trajs = [s.plan_gt for s in samples]
    if len(trajs) < cfg.plan_modes:
        raise ContractViolation(f"{len(trajs)} ego trajectories cannot seed {cfg.plan_modes} plan anchors")
    return cluster_anchors(np.array(trajs), cfg.plan_modes, seed)


# training -----------------------------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-2
    batch: int = 25
    seed: int = 0
    weight_decay: float = 0.5

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1:
            raise ContractViolation("steps must be >= 0 and batch >= 1")
        if not (self.lr >= 0 and self.weight_decay >= 0):
            raise ContractViolation("learning rate and weight decay must be >= 0")


def mean_loss(model: OmniSceneModel, samples: list[Sample], weights: LossWeights = LossWeights(),
              focal=(FOCAL_ALPHA, FOCAL_GAMMA)) -> float:
    return float(np.mean([forward(model, s, weights, focal).total.item() for s in samples])) if samples else 0.0


def train(model: OmniSceneModel, samples: list[Sample], tc: TrainConfig,
          weights: LossWeights = LossWeights(), on_step=None,
          focal=(FOCAL_ALPHA, FOCAL_GAMMA)) -> list[float]:
    """Adam on the mean total loss of a cyclic mini-batch. Returns the
    per-step batch losses."""
    params = list(model.parameters().values())
    opt = Adam(params, lr=tc.lr, weight_decay=tc.weight_decay)
    rng = np.random.default_rng(tc.seed)
    order = rng.permutation(len(samples)) if samples else np.array([], dtype=int)
    curve = []
    cursor = 0
    for step in range(tc.steps):
        batch = [samples[order[(cursor + i) % len(samples)]] for i in range(min(tc.batch, len(samples)))]
        cursor += len(batch)
        opt.zero_grad()
        losses = [forward(model, s, weights, focal).total for s in batch]
        loss = tsum(stack(losses)) * (1.0 / len(losses))
        backward(loss)
        opt.step()
        model.queries.clamp_to_volume()
        curve.append(loss.item())
        if on_step is not None:
            on_step(step, curve[-1])
    return curve


# evaluation ----------------------------------------------------------------------------------------------

def gt_timeline(sc: Scenario, horizon: int) -> ObstacleTimeline:
    t = sc.current
    agents = [[a.footprint(t + k) for k in range(1, horizon + 1)] for a in sc.agents]
    return ObstacleTimeline(static=list(sc.map.obstacles), agents=agents)


def route_of(sc: Scenario, extend: float = 30.0) -> np.ndarray:
    pts = sc.to_ego(sc.ego[sc.current:, :2], sc.current)
    d = pts[-1] - pts[-2]
    n = np.linalg.norm(d)
    tail = pts[-1] + (d / n * extend if n > 1e-6 else np.array([extend, 0.0]))
    return np.vstack([pts, tail])


def world_model(sc: Scenario, fw: Forward, cfg: ModelConfig) -> WorldModel:
    """Planner view: map, static obstacles, and for each tracked agent its
    predicted modes plus constant-velocity and stand-still hypotheses."""
    t = sc.current
    dyn = []
    for i, a in enumerate(sc.agents):
        here = sc.to_ego(a.poses[t, :2], t)[0]
        before = sc.to_ego(a.poses[t - 1, :2], t)[0]
        steps = np.arange(1, cfg.motion_horizon + 1)[:, None]
        cv = here + (here - before) * steps
        still = np.repeat(here[None], cfg.motion_horizon, axis=0)
        modes = np.concatenate([fw.motion_modes[i], cv[None], still[None]], axis=0)
        yaw = float(a.poses[t, 3] - sc.ego[t, 2])
        dyn.append(DynamicAgent((a.size[0] / 2, a.size[1] / 2), modes, tuple(here), yaw))
    drivable = [sc.to_ego(p, t) for p in sc.map.drivable]
    static = [_to_ego_box(sc, b, t) for b in sc.map.obstacles]
    return WorldModel(drivable=drivable, static=static, dynamic=dyn, route=route_of(sc))


def _to_ego_box(sc: Scenario, box, t):
    c = sc.to_ego(box.center, t)[0]
    return OrientedBox2D(tuple(c), box.half_extents, box.yaw - sc.ego[t, 2])


@dataclass
class EvalRow:
    scenario: str
    minADE: float
    minFDE: float
    MR: float
    L2: list[float]
    L2_avg: float
    CR: list[bool]
    feasible_anchor: bool
    infeasible_fallback: bool
    plan: np.ndarray
    selected: int
    world: WorldModel | None = None


def evaluate_sample(model: OmniSceneModel, s: Sample, w: UtilityWeights = UtilityWeights(),
                    pcfg: PlanEvalConfig = PlanEvalConfig()) -> EvalRow:
    fw = forward(model, s)
    sc = s.scenario
    ades, fdes = [], []
    for modes, gt, pos in zip(fw.motion_modes[s.visible], s.motion_gt[s.visible], s.positions[s.visible]):
        a, f, _, _ = min_ade_fde(modes, gt + pos[:2])
        ades.append(a)
        fdes.append(f)
    world = world_model(sc, fw, model.cfg)
    ts = TrajectorySet(fw.plan_modes, fw.plan_logits)
    sel = select(ts, world, w)
    plan = ts.modes[sel.index]
    horizon = pcfg.step_of(pcfg.horizons[-1])
    timeline = gt_timeline(sc, horizon)
    l2, l2_avg = planning_l2(plan, s.plan_gt, pcfg)
    cr = collision_flags(plan, timeline, pcfg)
    ok_anchor = any(feasible(a, world) and not collision_flags(a, timeline, pcfg)[-1]
                    for a in model.plan_anchors.anchors)
    return EvalRow(sc.scenario_id,
                   float(np.mean(ades)) if ades else 0.0,
                   float(np.mean(fdes)) if fdes else 0.0,
                   float(np.mean([f > pcfg.miss_threshold for f in fdes])) if fdes else 0.0,
                   l2, l2_avg, cr, ok_anchor, sel.infeasible, plan, sel.index, world)


def gt_plan_row(s: Sample, pcfg: PlanEvalConfig = PlanEvalConfig()) -> tuple[list[float], list[bool]]:
    """Metrics of the ground-truth ego future used as the plan."""
    horizon = pcfg.step_of(pcfg.horizons[-1])
    l2, _ = planning_l2(s.plan_gt, s.plan_gt, pcfg)
    return l2, collision_flags(s.plan_gt, gt_timeline(s.scenario, horizon), pcfg)
