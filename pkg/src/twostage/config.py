"""Experiment configuration: YAML in, validated dataclasses out, canonical hash."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .adapt import AdaptConfig
from .errors import ConfigurationError
from .infer import PROTOCOLS
from .model import ModelConfig, PretrainConfig
from .peft import STRATEGIES
from .synthdata import PROFILES, UniverseConfig

OUTPUT_ENV = "TWOSTAGE_OUTPUT_DIR"
DEFAULT_SEEDS = (1, 2, 3)

TOP_KEYS = {"profile", "data", "model", "pretrain", "adapt", "protocol", "seeds", "output_dir"}
DATA_KEYS = {"universe", "task"}
TASK_KEYS = {"eval_per_class", "classes", "overlap"}
MODEL_KEYS = {"n_blocks", "d", "mlp_hidden", "max_text_len", "ln_eps", "init_tau", "seed"}
PRETRAIN_KEYS = {"steps", "batch", "lr", "weight_decay", "max_tau", "holdout_per_class", "seed"}
ADAPT_KEYS = {f.name for f in fields(AdaptConfig)} - {"seed"}
UNIVERSE_KEYS = {f.name for f in fields(UniverseConfig)}


@dataclass
class TaskSpec:
    eval_per_class: int = 30
    classes: list[int] | None = None  # None: the universe's shifted classes
    overlap: int = 0


@dataclass
class ExperimentConfig:
    universe: UniverseConfig = field(default_factory=UniverseConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    protocol: str = "base-to-novel"
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    output_dir: str = "runs"
    profile: str | None = None

    def validate(self) -> None:
        self.universe.validate()
        self.model.validate()
        self.adapt.validate()
        if self.protocol not in PROTOCOLS:
            raise ConfigurationError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.adapt.peft not in STRATEGIES:
            raise ConfigurationError(f"adapt.peft must be one of {STRATEGIES}, got {self.adapt.peft!r}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.task.eval_per_class < 1 or self.task.overlap < 0:
            raise ConfigurationError("task.eval_per_class must be positive and overlap non-negative")
        if self.universe.token_dim != self.model.d:
            raise ConfigurationError("universe token_dim must equal model d")
        if self.pretrain.steps < 0 or self.pretrain.batch < 2:
            raise ConfigurationError("pretrain needs steps >= 0 and batch >= 2")

    def to_dict(self) -> dict:
        """Canonical nested form (derived model fields omitted)."""
        model = {k: v for k, v in asdict(self.model).items() if k in MODEL_KEYS}
        pretrain = {k: v for k, v in asdict(self.pretrain).items() if k in PRETRAIN_KEYS}
        universe = asdict(self.universe)
        universe["grid"] = list(universe["grid"])
        return {
            "data": {"universe": universe, "task": asdict(self.task)},
            "model": model,
            "pretrain": pretrain,
            "adapt": {k: v for k, v in asdict(self.adapt).items() if k in ADAPT_KEYS},
            "protocol": self.protocol,
            "seeds": list(self.seeds),
        }

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form; output paths do not enter the hash."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def adapt_for(self, seed: int) -> AdaptConfig:
        return self.adapt.replace(seed=seed)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _check_keys(section: str, data, allowed: set) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"section {section!r} must be a mapping")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {section}: {', '.join(map(str, unknown))}")
    return data


def _build(cls, section: str, values: dict):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"bad {section} section: {exc}") from exc


def from_dict(raw: dict | None) -> ExperimentConfig:
    """Validate a nested mapping; unknown keys at any level are rejected."""
    raw = _check_keys("config", raw or {}, TOP_KEYS)
    data = _check_keys("data", raw.get("data"), DATA_KEYS)
    uni = dict(_check_keys("data.universe", data.get("universe"), UNIVERSE_KEYS))
    task = dict(_check_keys("data.task", data.get("task"), TASK_KEYS))
    adapt = dict(_check_keys("adapt", raw.get("adapt"), ADAPT_KEYS))

    profile = raw.get("profile")
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        spec = PROFILES[profile]
        uni = {**spec["universe"], **uni}
        task = {**{k: v for k, v in spec["task"].items() if k in TASK_KEYS}, **task}
        adapt = {**{k: v for k, v in spec.get("adapt", {}).items() if k in ADAPT_KEYS},
                 "k": spec["task"]["k"], **adapt}

    if "grid" in uni:
        uni["grid"] = tuple(int(g) for g in uni["grid"])
    universe = _build(UniverseConfig, "data.universe", uni)
    mvals = dict(_check_keys("model", raw.get("model"), MODEL_KEYS))
    mvals.setdefault("d", universe.token_dim)
    model = _build(ModelConfig, "model", {**mvals, "n_classes": universe.n_classes,
                                          "grid": tuple(universe.grid)})
    pvals = dict(_check_keys("pretrain", raw.get("pretrain"), PRETRAIN_KEYS))
    pretrain = _build(PretrainConfig, "pretrain", {**pvals, "model": model})
    seeds = raw.get("seeds", list(DEFAULT_SEEDS))
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, (list, tuple)) or not all(isinstance(s, int) for s in seeds):
        raise ConfigurationError("seeds must be an integer or a list of integers")
    cfg = ExperimentConfig(
        universe=universe,
        task=_build(TaskSpec, "data.task", task),
        model=model,
        pretrain=pretrain,
        adapt=_build(AdaptConfig, "adapt", adapt),
        protocol=raw.get("protocol", "base-to-novel"),
        seeds=tuple(seeds),
        output_dir=str(raw.get("output_dir") or os.environ.get(OUTPUT_ENV) or "runs"),
        profile=profile,
    )
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc
    return from_dict(raw)


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Apply command-line overrides; ``None`` values are ignored."""
    cfg = copy.deepcopy(cfg)
    adapt_changes = {k: v for k, v in overrides.items()
                     if v is not None and k in ADAPT_KEYS}
    if adapt_changes:
        cfg.adapt = cfg.adapt.replace(**adapt_changes)
    if overrides.get("protocol") is not None:
        cfg.protocol = overrides["protocol"]
    if overrides.get("seeds"):
        cfg.seeds = tuple(overrides["seeds"])
    if overrides.get("output_dir") is not None:
        cfg.output_dir = str(overrides["output_dir"])
    cfg.validate()
    return cfg
