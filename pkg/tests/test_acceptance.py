"""Acceptance criteria 1-9, each printing one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``. Criteria 6 and 8
train the toy model on the default configuration and take several minutes.
"""
import io
import math
import time

import numpy as np
import pytest

from omniscene.cli import (ABLATION_COLUMNS, build_samples, cmd_ablate_modes, cmd_diagnose_mi, cmd_eval,
                           cmd_generate, cmd_train, load_model, load_split)
from omniscene.config import RunConfig, parse_config
from omniscene.infotheory import interaction_information, mutual_information, report
from omniscene.losses import focal_loss
from omniscene.metrics import collision_flags, legacy_grid_collision, rotating_ego_scene, small_obstacle_scene
from omniscene.model import evaluate_sample, init_model
from omniscene.numeric import load_params, save_params
from omniscene.planner import anchor_similarity
from omniscene.simulator import mine_knowledge

from _oracles import hungarian_agrees, sat_oracle_agreement, select_agrees
from _ops import OP_CASES, check_op
from _scenes import MINING_EXPECTED, mining_scene
from _toy import attention_sums, check_pipeline

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def emit(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, detail
    return emit


def test_criterion_1_gradients(verdict):
    start = time.perf_counter()
    op_worst = max(check_op(name, seed) for name in OP_CASES for seed in range(100))
    pipe_worst = max(check_pipeline(seed) for seed in range(100))
    elapsed = time.perf_counter() - start
    ok = op_worst <= 1e-5 and pipe_worst <= 1e-5 and elapsed < 60
    verdict(1, ok, f"{len(OP_CASES)} ops worst rel err {op_worst:.2e}, pipeline worst {pipe_worst:.2e} "
                   f"over 100 seeds, {elapsed:.1f} s")


def test_criterion_2_attention_normalization(verdict):
    worst = max(attention_sums(seed) for seed in range(1000))
    verdict(2, worst <= 1e-9, f"max |sum - 1| over 1000 passes = {worst:.2e}")


def test_criterion_3_oracles(verdict):
    hung = sum(hungarian_agrees(seed) for seed in range(100))
    sel = sum(select_agrees(seed) for seed in range(1000))
    agree, total = sat_oracle_agreement(10_000, seed=0)
    ok = hung == 100 and sel == 1000 and agree / total >= 0.999
    verdict(3, ok, f"hungarian {hung}/100 seeds, select {sel}/1000, SAT {agree}/{total} "
                   f"({100 * agree / total:.2f}%)")


def test_criterion_4_collision_protocol(verdict):
    plan, world = small_obstacle_scene()
    exact, grid = collision_flags(plan, world), legacy_grid_collision(plan, world, cell=0.5)
    rplan, rworld = rotating_ego_scene()
    with_yaw = collision_flags(rplan, rworld, use_yaw=True)
    without = collision_flags(rplan, rworld, use_yaw=False)
    ok = any(exact) and not any(grid) and with_yaw != without
    verdict(4, ok, f"small obstacle exact={exact} grid={grid}; rotating ego yaw={with_yaw} no-yaw={without}")


def _random_table(rng):
    shape = tuple(rng.integers(2, 5, 3))
    p = rng.random(shape) * (rng.random(shape) > 0.25)
    p.flat[0] += 1e-3
    return p / p.sum()


def test_criterion_5_closed_forms(verdict):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(6, 2))
    c = 0.9
    sim_self = anchor_similarity(a, a)
    sim_off = anchor_similarity(a + c * np.array([math.cos(0.4), math.sin(0.4)]), a)
    focal = focal_loss([0.5, 0.5], 1, alpha=0.25, gamma=2.0).item()
    xor = np.zeros((2, 2, 2))
    for i in range(2):
        for t in range(2):
            xor[i ^ t, i, t] = 0.25
    ii = interaction_information(xor)
    gaps = []
    for _ in range(100):
        p = _random_table(rng)
        r = report(p)
        gaps.append(abs(mutual_information(p) - (r.I_BI + r.I_BT_given_I)))
    errs = {"sim(self)": abs(sim_self - 1), "sim(offset)": abs(sim_off - math.exp(-c * c)),
            "focal": abs(focal - 0.25 * 0.25 * math.log(2)), "xor": abs(ii + math.log(2)),
            "decomposition": max(gaps)}
    ok = all(v <= 1e-12 for v in errs.values())
    verdict(5, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    """Scenarios, the trained model and the untrained baseline for the default configuration."""
    cfg = RunConfig().with_overrides(out_dir=str(tmp_path_factory.mktemp("default")))
    start = time.perf_counter()
    cmd_generate(cfg, out=io.StringIO())
    result = cmd_train(cfg, out=io.StringIO())
    rows = cmd_eval(cfg, out=io.StringIO(), plots=False)
    elapsed = time.perf_counter() - start
    model = load_model(cfg)
    eval_samples = build_samples(cfg, load_split(cfg, "eval"))
    trained = [evaluate_sample(model, s, cfg.utility) for s in eval_samples]
    fresh = init_model(cfg.model, model.motion_anchors, model.plan_anchors, cfg.seed)
    untrained = [evaluate_sample(fresh, s, cfg.utility) for s in eval_samples]
    return cfg, result, rows, trained, untrained, elapsed


def test_criterion_6_toy_training(verdict, default_run, capsys):
    cfg, result, _, trained, untrained, elapsed = default_run
    loss_ratio = result.final_loss / result.initial_loss
    ade_before = float(np.mean([r.minADE for r in untrained]))
    ade_after = float(np.mean([r.minADE for r in trained]))
    eligible = [r for r in trained if r.feasible_anchor]
    collided = [r.scenario for r in eligible if any(r.CR)]
    ok = loss_ratio < 0.5 and ade_after < 0.5 * ade_before and not collided and elapsed < 600
    # directional information diagnostic, reported but never asserted
    mi = cmd_diagnose_mi(cfg, out=io.StringIO())
    v, t = mi["vision-only"].I_B_IT, mi["text-fused"].I_B_IT
    with capsys.disabled():
        print(f"\nSOFT CHECK (mutual information): {'PASS' if t >= v else 'WARN'} | "
              f"I(B;I,T) text-fused {t:.4f} vs vision-only {v:.4f} nats")
    verdict(6, ok, f"loss {result.initial_loss:.3f} -> {result.final_loss:.3f} (ratio {loss_ratio:.3f}); "
                   f"held-out minADE {ade_before:.3f} -> {ade_after:.3f} (ratio {ade_after / ade_before:.3f}); "
                   f"{len(eligible)} scenes with a safe anchor, collisions in {collided}; {elapsed:.0f} s")


def test_criterion_7_knowledge_mining(verdict):
    mined = mine_knowledge(mining_scene(), 3)
    got = {"dynamic": mined.dynamic, "signs": mined.signs, "lights": mined.lights}
    verdict(7, got == MINING_EXPECTED, f"selected {got}, expected {MINING_EXPECTED}")


def test_criterion_8_mode_ablation(verdict, default_run):
    cfg = default_run[0]
    start = time.perf_counter()
    table = cmd_ablate_modes(cfg, out=io.StringIO())
    elapsed = time.perf_counter() - start
    lines = (cfg.out_dir / "ablation_modes.csv").read_text().splitlines()
    header = lines[0].split(",")
    ok = (header == ABLATION_COLUMNS and len(header) == 9 and [r["modes"] for r in table] == [1, 2, 3, 4, 5, 6, 10]
          and all(len(line.split(",")) == 9 for line in lines) and elapsed < 1800)
    verdict(8, ok, f"{len(table)} rows x {len(header)} columns, modes {[r['modes'] for r in table]}, "
                   f"{elapsed:.0f} s")


SMALL_RUN = """
[run]
train_scenarios = 6
eval_scenarios = 3
[train]
steps = 10
batch = 6
"""


def test_criterion_9_determinism(verdict, tmp_path):
    outputs = []
    for name in ("first", "second"):
        cfg = parse_config(SMALL_RUN).with_overrides(seed=5, out_dir=str(tmp_path / name))
        cmd_generate(cfg, out=io.StringIO())
        cmd_train(cfg, out=io.StringIO())
        cmd_eval(cfg, out=io.StringIO(), plots=False)
        outputs.append({f: (cfg.out_dir / f).read_bytes() for f in ("metrics.csv", "loss_curve.csv")}
                       | {"params": cfg.param_path.read_bytes()})
    same = outputs[0] == outputs[1]
    params = load_params(tmp_path / "first" / "params.omsk")
    save_params(tmp_path / "copy.omsk", params)
    back = load_params(tmp_path / "copy.omsk")
    exact = params.keys() == back.keys() and all(
        params[k].dtype == back[k].dtype and params[k].tobytes() == back[k].tobytes() for k in params)
    rewritten = (tmp_path / "copy.omsk").read_bytes() == outputs[0]["params"]
    verdict(9, same and exact and rewritten,
            f"CSV and parameter bytes identical across runs: {same}; {len(params)} tensors round-trip "
            f"bit-exactly: {exact and rewritten}")
