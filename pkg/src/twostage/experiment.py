"""Experiment orchestration shared by the command line and the acceptance suite."""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint
from .adapt import AdaptResult, run_2sfs, run_single_stage
from .config import ExperimentConfig
from .dynamics import sweep_alpha, sweep_budget
from .errors import ConfigurationError
from .infer import metrics_csv
from .model import DualEncoder, pretrain
from .synthdata import FewShotTask, Universe, build_universe, make_task

METHODS = ("2sfs", "single-stage")


def universe_digest(universe: Universe) -> str:
    h = hashlib.sha256()
    for arr in (universe.token_codes, universe.images, universe.labels):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def build_universe_from(cfg: ExperimentConfig) -> Universe:
    return build_universe(copy.deepcopy(cfg.universe))


def build_task(cfg: ExperimentConfig, universe: Universe, seed: int) -> FewShotTask:
    """Task over the configured classes (default: every shifted class) drawn with ``seed``."""
    classes = cfg.task.classes
    if classes is None:
        classes = universe.target_classes()
        if cfg.task.overlap:
            classes = universe.source_classes()[-cfg.task.overlap:] + classes
    if len(classes) < 2:
        raise ConfigurationError("the task needs at least two classes (set n_shifted or data.task.classes)")
    return make_task(universe, classes, k=cfg.adapt.k, eval_per_class=cfg.task.eval_per_class,
                     seed=seed, mode=cfg.protocol)


def pretrain_from(cfg: ExperimentConfig, universe: Universe | None = None, log=None):
    universe = universe or build_universe_from(cfg)
    model, report = pretrain(universe, cfg.pretrain, log=log)
    report["universe_digest"] = universe_digest(universe)
    return model, report


def load_pretrained(path, cfg: ExperimentConfig, universe: Universe) -> DualEncoder:
    """Load a pretrained checkpoint and check it against the config and universe."""
    model, _, meta = checkpoint.load(path)
    if model.config.to_dict() != cfg.model.to_dict():
        raise ConfigurationError("checkpoint architecture does not match the config's model section")
    if model.strategy is not None:
        raise ConfigurationError("expected a pretrained checkpoint, got an adapted one")
    digest = meta.get("universe_digest")
    if digest is not None and digest != universe_digest(universe):
        raise ConfigurationError("checkpoint was pretrained on a different universe")
    return model


@dataclass
class SeedOutcome:
    seed: int
    result: AdaptResult
    row: dict


@dataclass
class RunRecord:
    config_hash: str
    version: str
    method: str
    outcomes: list[SeedOutcome] = field(default_factory=list)
    seconds: float = 0.0
    files: dict[str, str] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        rows = [o.row for o in self.outcomes]
        return rows + [mean_row(rows)] if rows else rows

    def summary(self) -> dict:
        return {"config_hash": self.config_hash, "version": self.version, "method": self.method,
                "seconds": round(self.seconds, 3), "files": self.files,
                "metrics": [{k: v for k, v in r.items()} for r in self.rows()]}


def mean_row(rows: list[dict]) -> dict:
    out = dict(rows[0])
    out["seed"] = "mean"
    for col in ("base_acc", "novel_acc", "hm", "text_encoder_calls"):
        vals = [r[col] for r in rows if r[col] is not None]
        out[col] = float(np.mean(vals)) if len(vals) == len(rows) else None
    return out


def run_seeds(cfg: ExperimentConfig, model: DualEncoder, universe: Universe, method: str = "2sfs",
              record: bool = True, log=None) -> RunRecord:
    """``method`` on a fresh copy of ``model`` for every configured seed."""
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    runner = run_2sfs if method == "2sfs" else run_single_stage
    rec = RunRecord(cfg.config_hash(), __version__, method)
    t0 = time.perf_counter()
    for seed in cfg.seeds:
        task = build_task(cfg, universe, seed)
        acfg = cfg.adapt_for(seed)
        res = runner(copy.deepcopy(model), None, task, acfg, record=record)
        res.curve.config_hash = rec.config_hash
        alpha = acfg.alpha if method == "2sfs" else 1.0
        row = res.metrics.as_row(seed=seed, peft=acfg.peft, alpha=alpha, M=acfg.M, k=acfg.k)
        rec.outcomes.append(SeedOutcome(seed, res, row))
        if log is not None:
            log(f"{method} seed {seed}: base {row['base_acc']:.2f} novel "
                f"{row['novel_acc'] if row['novel_acc'] is None else round(row['novel_acc'], 2)} "
                f"hm {row['hm'] if row['hm'] is None else round(row['hm'], 2)}")
    rec.seconds = time.perf_counter() - t0
    return rec


def write_run(rec: RunRecord, out_dir: Path, save_checkpoints: bool = True,
              model_meta: dict | None = None) -> RunRecord:
    """metrics.csv, one curve CSV and adapted checkpoint per seed, and run.json."""
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text(metrics_csv(rec.rows(), rec.config_hash))
    rec.files["metrics"] = str(metrics_path)
    for o in rec.outcomes:
        curve_path = out_dir / f"curve_seed{o.seed}.csv"
        curve_path.write_text(o.result.curve.to_csv())
        rec.files[f"curve_seed{o.seed}"] = str(curve_path)
    if save_checkpoints:
        for o in rec.outcomes:
            ck = out_dir / f"adapted_seed{o.seed}.ckpt"
            checkpoint.save(ck, o.result.model, o.result.classifier,
                            meta={"config_hash": rec.config_hash, "seed": o.seed, **(model_meta or {})})
            rec.files[f"checkpoint_seed{o.seed}"] = str(ck)
    (out_dir / "run.json").write_text(json.dumps(rec.summary(), indent=1, sort_keys=True) + "\n")
    return rec


def run_sweep(cfg: ExperimentConfig, model: DualEncoder, universe: Universe, kind: str, grid,
              log=None) -> dict[int, object]:
    fn = {"alpha": sweep_alpha, "budget": sweep_budget}.get(kind)
    if fn is None:
        raise ConfigurationError(f"unknown sweep {kind!r}; choose alpha or budget")
    out = {}
    for seed in cfg.seeds:
        task = build_task(cfg, universe, seed)
        res = fn(model, task, cfg.adapt_for(seed), grid)
        out[seed] = res
        if log is not None:
            log(f"sweep {kind} seed {seed}: best {res.best.param:g} (hm {res.best.hm})")
    return out
