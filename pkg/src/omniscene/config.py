"""Run configuration: flat key/value sections, every key mirrors one field.

Example::

    [run]
    seed = 0
    train_scenarios = 25

    [model]
    d = 8

Unknown sections or keys, unparsable values and values that break a module
precondition all raise :class:`ConfigError`.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, ContractViolation
from .losses import FOCAL_ALPHA, FOCAL_GAMMA, LossWeights
from .model import ModelConfig, TrainConfig
from .planner import UtilityWeights
from .simulator import ScenarioSpec

DEFAULT_ABLATION_MODES = (1, 2, 3, 4, 5, 6, 10)
# the training seed always follows [run] seed
EXCLUDED = {"train": {"seed"}}


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    train_scenarios: int = 25
    eval_scenarios: int = 10
    eval_seed_offset: int = 1000
    scenario_dir: str = "scenarios"
    param_path: str = "params.omsk"
    out_dir: str = "out"
    ablation_modes: tuple[int, ...] = DEFAULT_ABLATION_MODES
    mi_bins: int = 4

    def __post_init__(self):
        if self.train_scenarios < 0 or self.eval_scenarios < 0:
            raise ContractViolation("scenario counts must be non-negative")
        if self.eval_seed_offset < self.train_scenarios:
            raise ContractViolation("evaluation seeds would overlap the training seeds")
        if not self.ablation_modes or any(m < 1 for m in self.ablation_modes):
            raise ContractViolation("ablation mode counts must be positive")
        if self.mi_bins < 2:
            raise ContractViolation("mi_bins must be >= 2")


@dataclass(frozen=True)
class FocalSettings:
    focal_alpha: float = FOCAL_ALPHA
    focal_gamma: float = FOCAL_GAMMA

    def __post_init__(self):
        if not 0.0 <= self.focal_alpha <= 1.0 or self.focal_gamma < 0:
            raise ContractViolation("focal loss needs 0 <= alpha <= 1 and gamma >= 0")


@dataclass(frozen=True)
class ScenarioSettings:
    n_agents: int = 4
    max_static: int = 2
    p_intersection: float = 0.6
    p_static: float = 0.4

    def __post_init__(self):
        if not (0.0 <= self.p_intersection <= 1.0 and 0.0 <= self.p_static <= 1.0):
            raise ContractViolation("probabilities must lie in [0, 1]")
        self.spec()

    def spec(self) -> ScenarioSpec:
        return ScenarioSpec(n_agents=self.n_agents, max_static=self.max_static,
                            p_intersection=self.p_intersection, p_static=self.p_static)


# section name -> (RunConfig attribute, dataclass type)
SECTIONS = {
    "run": ("run", RunSettings),
    "scenario": ("scenario", ScenarioSettings),
    "model": ("model", ModelConfig),
    "train": ("train", TrainConfig),
    "loss": ("loss", LossWeights),
    "focal": ("focal", FocalSettings),
    "utility": ("utility", UtilityWeights),
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    scenario: ScenarioSettings = field(default_factory=ScenarioSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    focal: FocalSettings = field(default_factory=FocalSettings)
    utility: UtilityWeights = field(default_factory=UtilityWeights)

    @property
    def seed(self) -> int:
        return self.run.seed

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None) -> "RunConfig":
        run = self.run
        if seed is not None:
            run = replace(run, seed=seed)
        if out_dir is not None:
            run = replace(run, out_dir=str(out_dir))
        return replace(self, run=run, train=replace(self.train, seed=run.seed))

    # relative paths live under the output directory
    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else Path(self.run.out_dir) / p

    @property
    def scenario_dir(self) -> Path:
        return self.path(self.run.scenario_dir)

    @property
    def param_path(self) -> Path:
        return self.path(self.run.param_path)

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out_dir)

    def train_seeds(self) -> list[int]:
        return [self.seed * 10_000 + i for i in range(self.run.train_scenarios)]

    def eval_seeds(self) -> list[int]:
        base = self.seed * 10_000 + self.run.eval_seed_offset
        return [base + i for i in range(self.run.eval_scenarios)]


def _parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _build(cls, values: dict, section: str):
    try:
        return cls(**values)
    except ContractViolation as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True, empty_lines_in_values=False)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if parser.defaults():
        raise ConfigError(f"{source}: keys outside any section: {sorted(parser.defaults())}")
    parts = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
    for section, (attr, cls) in SECTIONS.items():
        defaults = cls()
        known = {f.name: getattr(defaults, f.name) for f in fields(cls)
                 if f.init and f.name not in EXCLUDED.get(section, ())}
        values = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
                values[key] = _parse_value(raw, known[key], f"{source} [{section}] {key}")
        parts[attr] = _build(cls, values, section)
    return RunConfig(**parts).with_overrides()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, (attr, cls) in SECTIONS.items():
        part = getattr(cfg, attr)
        lines.append(f"[{section}]")
        for f in fields(cls):
            value = getattr(part, f.name)
            if f.init and f.name not in EXCLUDED.get(section, ()):
                lines.append(f"{f.name} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)
