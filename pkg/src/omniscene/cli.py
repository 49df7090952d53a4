"""Command-line entry points: generate, train, eval, ablate-modes, diagnose-mi.

Exit codes: 0 success, 1 configuration error, 2 contract violation, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import ConfigError, ContractViolation
from .infotheory import MiReport, discretize_features, report
from .metrics import MI_COLUMNS, METRIC_COLUMNS, PlanEvalConfig, write_metrics_csv
from .model import (EvalRow, OmniSceneModel, Sample, build_sample, evaluate_sample, forward, init_model,
                    mean_loss, motion_anchor_set, plan_anchor_set, train)
from .numeric import load_params, save_params, assign_params
from .planner import AnchorSet, maneuver_label
from .plots import plot_bev
from .simulator import Scenario, check_scenario, generate_scenario, load_scenario, save_scenario

SCENARIO_SUFFIX = ".scn"
ABLATION_COLUMNS = ["modes", "L2_1s", "L2_2s", "L2_3s", "L2_avg", "CR_1s", "CR_2s", "CR_3s", "CR_avg"]
MI_TABLE_COLUMNS = ["features"] + MI_COLUMNS + ["I_B_IT"]


def _focal(cfg: RunConfig) -> tuple[float, float]:
    return cfg.focal.focal_alpha, cfg.focal.focal_gamma


# generate -------------------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out=sys.stdout) -> list[Path]:
    written = []
    for split, seeds in (("train", cfg.train_seeds()), ("eval", cfg.eval_seeds())):
        folder = cfg.scenario_dir / split
        if seeds:
            folder.mkdir(parents=True, exist_ok=True)
        for seed in seeds:
            sc = generate_scenario(seed, cfg.scenario.spec())
            problems = check_scenario(sc)
            path = folder / f"{sc.scenario_id}{SCENARIO_SUFFIX}"
            save_scenario(path, sc)
            written.append(path)
            status = "ok" if not problems else "; ".join(problems)
            print(f"{split} {sc.scenario_id}: {len(sc.agents)} agents, {status}", file=out)
    return written


def load_split(cfg: RunConfig, split: str) -> list[Scenario]:
    expected = cfg.run.train_scenarios if split == "train" else cfg.run.eval_scenarios
    folder = cfg.scenario_dir / split
    files = sorted(folder.glob(f"*{SCENARIO_SUFFIX}")) if folder.is_dir() else []
    if expected and not files:
        raise ConfigError(f"no {split} scenarios under {folder}; run 'generate' first")
    return [load_scenario(f) for f in files]


def build_samples(cfg: RunConfig, scenarios: list[Scenario]) -> list[Sample]:
    return [build_sample(sc, cfg.model) for sc in scenarios]


# train ----------------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: OmniSceneModel
    curve: list[float]
    initial_loss: float
    final_loss: float


def fit(cfg: RunConfig, samples: list[Sample]) -> TrainResult:
    motion = motion_anchor_set(samples, cfg.model, cfg.seed)
    plan = plan_anchor_set(samples, cfg.model, cfg.seed)
    model = init_model(cfg.model, motion, plan, cfg.seed)
    before = mean_loss(model, samples, cfg.loss, _focal(cfg))
    curve = train(model, samples, cfg.train, cfg.loss, focal=_focal(cfg))
    after = mean_loss(model, samples, cfg.loss, _focal(cfg))
    return TrainResult(model, curve, before, after)


def save_model(path: Path, model: OmniSceneModel) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    values = dict(model.parameters())
    values["anchors.motion"] = model.motion_anchors
    values["anchors.plan"] = model.plan_anchors.anchors
    save_params(path, values)


def load_model(cfg: RunConfig) -> OmniSceneModel:
    path = cfg.param_path
    if not path.is_file():
        raise ConfigError(f"no trained parameters at {path}; run 'train' first")
    values = load_params(path)
    if "anchors.motion" not in values or "anchors.plan" not in values:
        raise ContractViolation(f"{path} carries no anchors")
    plan = values["anchors.plan"]
    anchors = AnchorSet(plan, [maneuver_label(a) for a in plan])
    model = init_model(cfg.model, values["anchors.motion"], anchors, cfg.seed)
    assign_params(model.parameters(), values)
    return model


def write_loss_curve(path: Path, curve: list[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(float(v))])


def cmd_train(cfg: RunConfig, out=sys.stdout) -> TrainResult:
    samples = build_samples(cfg, load_split(cfg, "train"))
    if not samples:
        raise ConfigError("training needs at least one scenario")
    result = fit(cfg, samples)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    save_model(cfg.param_path, result.model)
    write_loss_curve(cfg.out_dir / "loss_curve.csv", result.curve)
    ratio = result.final_loss / result.initial_loss if result.initial_loss else float("nan")
    print(f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f} (ratio {ratio:.3f}); "
          f"parameters in {cfg.param_path}", file=out)
    return result


# eval -----------------------------------------------------------------------------------------

@dataclass
class MiFeatures:
    instance_vision: np.ndarray  # B from vision-only fused features
    instance_text: np.ndarray  # B from text-fused features
    vision: np.ndarray  # I: raw camera reading of each agent
    text: np.ndarray  # T: the scene's text embedding


def mi_features(model: OmniSceneModel, samples: list[Sample]) -> MiFeatures:
    bv, bt, vis, txt = [], [], [], []
    for s in samples:
        if not len(s.positions):
            continue
        fw = forward(model, s)
        bv.append(fw.vision_feats)
        bt.append(fw.text_feats)
        vis.append(s.track_feats[:, 0])
        txt.append(np.repeat(s.text[None], len(s.positions), axis=0))
    if not bv:
        empty = np.zeros((0, 1))
        return MiFeatures(empty, empty, empty, empty)
    return MiFeatures(*(np.concatenate(x) for x in (bv, bt, vis, txt)))


def mi_reports(feats: MiFeatures, bins: int) -> tuple[MiReport, MiReport] | None:
    if len(feats.vision) < bins:
        return None
    vision_only = report(discretize_features(feats.instance_vision, feats.vision, feats.text, bins))
    text_fused = report(discretize_features(feats.instance_text, feats.vision, feats.text, bins))
    return vision_only, text_fused


def metric_row(row: EvalRow) -> dict:
    return {"scenario": row.scenario, "minADE": row.minADE, "minFDE": row.minFDE, "MR": row.MR,
            "L2_1s": row.L2[0], "L2_2s": row.L2[1], "L2_3s": row.L2[2], "L2_avg": row.L2_avg,
            "CR_1s": row.CR[0], "CR_2s": row.CR[1], "CR_3s": row.CR[2]}


def cmd_eval(cfg: RunConfig, out=sys.stdout, plots: bool = True) -> list[dict]:
    model = load_model(cfg)
    samples = build_samples(cfg, load_split(cfg, "eval"))
    pcfg = PlanEvalConfig()
    evals = [evaluate_sample(model, s, cfg.utility, pcfg) for s in samples]
    rows = [metric_row(r) for r in evals]
    reps = mi_reports(mi_features(model, samples), cfg.run.mi_bins)
    # one batch-level estimate, repeated so the aggregate row stays a column mean
    mi = reps[1].as_dict() if reps else {k: float("nan") for k in MI_COLUMNS}
    for r in rows:
        r.update(mi)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(cfg.out_dir / "metrics.csv", rows, METRIC_COLUMNS + MI_COLUMNS)
    if plots and samples:
        folder = cfg.out_dir / "plots"
        folder.mkdir(parents=True, exist_ok=True)
        for s, r in zip(samples, evals):
            plot_bev(folder / f"{s.scenario.scenario_id}.svg", s, r, model)
    if rows:
        mean = {k: float(np.mean([float(r[k]) for r in rows])) for k in ("minADE", "L2_avg", "CR_3s")}
        print(f"{len(rows)} scenarios: minADE {mean['minADE']:.3f}, L2 avg {mean['L2_avg']:.3f}, "
              f"CR@3s {mean['CR_3s']:.3f}", file=out)
    else:
        print("no evaluation scenarios", file=out)
    return rows


# ablation -------------------------------------------------------------------------------------

def ablation_row(modes: int, rows: list[EvalRow]) -> dict:
    l2 = np.array([r.L2 for r in rows]) if rows else np.zeros((0, 3))
    cr = 100.0 * np.array([r.CR for r in rows], dtype=float) if rows else np.zeros((0, 3))
    l2m = l2.mean(axis=0) if rows else np.zeros(3)
    crm = cr.mean(axis=0) if rows else np.zeros(3)
    return {"modes": modes, "L2_1s": l2m[0], "L2_2s": l2m[1], "L2_3s": l2m[2], "L2_avg": l2m.mean(),
            "CR_1s": crm[0], "CR_2s": crm[1], "CR_3s": crm[2], "CR_avg": crm.mean()}


def write_table(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([v if isinstance(v, (int, str)) else repr(float(v)) for v in (r[c] for c in columns)])


def cmd_ablate_modes(cfg: RunConfig, modes=None, out=sys.stdout) -> list[dict]:
    """Retrain and evaluate once per planning mode count."""
    modes = tuple(modes or cfg.run.ablation_modes)
    train_samples = build_samples(cfg, load_split(cfg, "train"))
    eval_samples = build_samples(cfg, load_split(cfg, "eval"))
    if not train_samples:
        raise ConfigError("the ablation retrains per mode count and needs training scenarios")
    table = []
    for m in modes:
        sub = replace(cfg, model=replace(cfg.model, plan_modes=m))
        model = fit(sub, train_samples).model
        rows = [evaluate_sample(model, s, cfg.utility) for s in eval_samples]
        table.append(ablation_row(m, rows))
        r = table[-1]
        print(f"modes {m}: L2 avg {r['L2_avg']:.3f}, CR avg {r['CR_avg']:.3f}", file=out)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_table(cfg.out_dir / "ablation_modes.csv", table, ABLATION_COLUMNS)
    return table


# information diagnostics ----------------------------------------------------------------------

def cmd_diagnose_mi(cfg: RunConfig, out=sys.stdout) -> dict[str, MiReport]:
    model = load_model(cfg)
    samples = build_samples(cfg, load_split(cfg, "eval"))
    feats = mi_features(model, samples)
    reps = mi_reports(feats, cfg.run.mi_bins)
    if reps is None:
        raise ContractViolation(f"{len(feats.vision)} instances are too few for {cfg.run.mi_bins} bins")
    result = {"vision-only": reps[0], "text-fused": reps[1]}
    rows = [{"features": k, **v.as_dict(), "I_B_IT": v.I_B_IT} for k, v in result.items()]
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_table(cfg.out_dir / "mi.csv", rows, MI_TABLE_COLUMNS)
    for k, v in result.items():
        print(f"{k}: I(B;I,T) = {v.I_B_IT:.4f} nats, H(B|I,T) = {v.H_B_given_IT:.4f}", file=out)
    return result


# entry point ----------------------------------------------------------------------------------

COMMANDS = ("generate", "train", "eval", "ablate-modes", "diagnose-mi")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is reserved here
        raise ConfigError(message)


def _parse_modes(text: str) -> tuple[int, ...]:
    try:
        modes = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"--modes expects a comma-separated list of integers, got {text!r}") from None
    if not modes or any(m < 1 for m in modes):
        raise ConfigError("--modes needs positive mode counts")
    return modes


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="omniscene", description="Desk-scale multimodal perception, prediction and planning.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH", help="run configuration file")
    p.add_argument("--seed", type=int, metavar="N", help="override [run] seed")
    p.add_argument("--out", metavar="DIR", help="override [run] out_dir")
    p.add_argument("--modes", metavar="LIST", help="mode counts for ablate-modes, e.g. 1,2,3")
    return p


def run(argv=None, out=sys.stdout) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = cfg.with_overrides(seed=args.seed, out_dir=args.out)
    if args.modes is not None and args.command != "ablate-modes":
        raise ConfigError("--modes only applies to ablate-modes")
    if args.command == "generate":
        cmd_generate(cfg, out)
    elif args.command == "train":
        cmd_train(cfg, out)
    elif args.command == "eval":
        cmd_eval(cfg, out)
    elif args.command == "ablate-modes":
        cmd_ablate_modes(cfg, _parse_modes(args.modes) if args.modes else None, out)
    else:
        cmd_diagnose_mi(cfg, out)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
