"""Bird's-eye-view SVG plots in the ego frame at the scenario's current step."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EGO_HALF_EXTENTS  # noqa: E402
from .geometry import OrientedBox2D  # noqa: E402

# stable element ids so repeated runs write identical files
matplotlib.rcParams["svg.hashsalt"] = "omniscene"


def _box(ax, box: OrientedBox2D, **kw):
    c = box.corners()
    ax.fill(c[:, 0], c[:, 1], **kw)


def plot_bev(path, sample, row, model) -> None:
    """Map, agents with ground-truth futures, plan anchors, the selected plan
    and the ego's ground-truth future."""
    sc = sample.scenario
    t = sc.current
    fig, ax = plt.subplots(figsize=(6, 6))
    for poly in sc.map.drivable:
        p = sc.to_ego(poly, t)
        ax.fill(p[:, 0], p[:, 1], color="0.92", zorder=0)
    for line in sc.map.lanes.values():
        p = sc.to_ego(line, t)
        ax.plot(p[:, 0], p[:, 1], color="0.7", lw=0.6, ls="--", zorder=1)
    if row.world is not None:
        for b in row.world.static:
            _box(ax, b, color="tab:brown", zorder=3)
    for a in sc.agents:
        here = sc.to_ego(a.poses[t, :2], t)[0]
        yaw = a.poses[t, 3] - sc.ego[t, 2]
        _box(ax, OrientedBox2D(tuple(here), (a.size[0] / 2, a.size[1] / 2), yaw), color="tab:orange", zorder=3)
        fut = sc.to_ego(a.poses[t:t + 1 + model.cfg.motion_horizon, :2], t)
        ax.plot(fut[:, 0], fut[:, 1], color="tab:orange", lw=0.8, ls=":", zorder=3)
    origin = np.zeros((1, 2))
    for anchor in model.plan_anchors.anchors:
        a = np.vstack([origin, anchor])
        ax.plot(a[:, 0], a[:, 1], color="0.6", lw=0.6, zorder=2)
    _box(ax, OrientedBox2D((0.0, 0.0), EGO_HALF_EXTENTS, 0.0), color="tab:blue", zorder=4)
    gt = np.vstack([origin, sample.plan_gt])
    ax.plot(gt[:, 0], gt[:, 1], color="tab:green", lw=1.5, marker="o", ms=2, label="ground truth", zorder=5)
    plan = np.vstack([origin, row.plan])
    ax.plot(plan[:, 0], plan[:, 1], color="tab:blue", lw=1.5, marker="o", ms=2, label="selected plan", zorder=6)
    ax.set_xlim(-20, 50)
    ax.set_ylim(-35, 35)
    ax.set_aspect("equal")
    ax.set_xlabel("forward (m)")
    ax.set_ylabel("left (m)")
    flag = " (no feasible mode)" if row.infeasible_fallback else ""
    ax.set_title(f"{sc.scenario_id}: L2 avg {row.L2_avg:.2f} m{flag}", fontsize=9)
    ax.legend(loc="upper right", fontsize=7)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
