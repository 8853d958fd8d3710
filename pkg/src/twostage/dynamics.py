"""Learning-dynamics recording, breakpoint detection and budget sweeps."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .adapt import (AdaptConfig, AdaptResult, compute_budget, init_classifier, run_2sfs,
                    run_single_stage, stage_one, stage_two)
from .curves import DynamicsCurve
from .errors import ArgumentError
from .infer import evaluate
from .peft import attach


@dataclass(frozen=True)
class Breakpoint:
    iteration: int
    peak_novel: float
    final_novel: float
    base_at_peak: float
    final_base: float

    @property
    def decline(self) -> float:
        return self.peak_novel - self.final_novel


def moving_average(values, window: int) -> np.ndarray:
    """Centred moving average; the window is truncated at both ends."""
    x = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ArgumentError("smoothing window must be >= 1")
    lo_off, hi_off = (window - 1) // 2, window // 2
    out = np.empty_like(x)
    for i in range(len(x)):
        lo, hi = max(0, i - lo_off), min(len(x), i + hi_off + 1)
        out[i] = x[lo:hi].mean()
    return out


def detect_breakpoint(curve: DynamicsCurve, window: int = 3, margin: float = 2.0) -> Breakpoint | None:
    """Peak of the smoothed novel curve, reported only if it is a real turning point.

    A breakpoint is the earliest argmax t* of the smoothed novel accuracy,
    provided the smoothed novel accuracy at the end sits at least ``margin``
    points below the peak while the smoothed base accuracy at the end is no
    lower than at t*.  Returns ``None`` otherwise.
    """
    if len(curve) < 3:
        raise ArgumentError("breakpoint detection needs at least 3 records")
    if window > len(curve):
        raise ArgumentError(f"window {window} exceeds the {len(curve)} recorded points")
    if any(v is None for v in curve.novel):
        raise ArgumentError("curve has no novel accuracy (all-to-all run)")
    novel = moving_average(curve.novel, window)
    base = moving_average(curve.base, window)
    i = int(np.argmax(novel))
    if novel[-1] > novel[i] - margin or base[-1] < base[i]:
        return None
    return Breakpoint(curve.iterations[i], float(novel[i]), float(novel[-1]),
                      float(base[i]), float(base[-1]))


def record_curve(model, task, config: AdaptConfig, strategy: str | None = None,
                 method: str = "single-stage") -> AdaptResult:
    """Run on a copy of ``model`` with held-out evaluation every ``eval_interval`` steps."""
    if config.eval_interval <= 0:
        raise ArgumentError("recording a curve needs eval_interval > 0")
    m, _, _ = compute_budget(config)
    if m % config.eval_interval:
        raise ArgumentError(f"eval_interval {config.eval_interval} does not divide the budget {m}")
    runner = {"single-stage": run_single_stage, "2sfs": run_2sfs}.get(method)
    if runner is None:
        raise ArgumentError(f"unknown method {method!r}")
    return runner(copy.deepcopy(model), strategy, task, config, record=True)


# -- sweeps --------------------------------------------------------------------------
@dataclass(frozen=True)
class SweepRow:
    param: float
    base_acc: float
    novel_acc: float | None
    hm: float | None
    m: int
    m1: int
    text_encoder_calls: int


@dataclass
class SweepResult:
    kind: str
    rows: list[SweepRow]

    @property
    def best(self) -> SweepRow:
        """Row with the highest HM (base accuracy under all-to-all); first in grid order on ties."""
        key = [r.hm if r.hm is not None else r.base_acc for r in self.rows]
        return self.rows[int(np.argmax(key))]

    def to_csv(self, config_hash: str = "") -> str:
        lines = [f"# config_hash={config_hash} sweep={self.kind}"] if config_hash else []
        lines.append("param,base_acc,novel_acc,hm")
        for r in self.rows:
            cells = [f"{r.param:g}", f"{r.base_acc:.6f}",
                     "" if r.novel_acc is None else f"{r.novel_acc:.6f}",
                     "" if r.hm is None else f"{r.hm:.6f}"]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


_SHARED = ("k", "lr", "wd", "batch", "seed", "peft", "rank", "ctx_len")


def run_2sfs_family(model, task, configs: list[AdaptConfig], strategy: str | None = None):
    """2SFS for several budgets at once, sharing the common stage-one prefix.

    Stage one is deterministic given the seed, so a run with budget m1 is an
    exact prefix of any run with a larger m1.  One pass of stage one up to the
    largest m1 snapshots (Omega, sampler state) at every requested m1; each
    configuration then finishes its own stage two from its snapshot.  The
    results equal independent :func:`run_2sfs` calls without recording.
    """
    if not configs:
        raise ArgumentError("no configurations to run")
    ref = configs[0]
    for c in configs:
        c.validate()
        if any(getattr(c, f) != getattr(ref, f) for f in _SHARED):
            raise ArgumentError("configurations may differ only in M and alpha")
    strategy = strategy or ref.peft
    budgets = [compute_budget(c) for c in configs]
    wanted = {m1 for _, m1, _ in budgets}

    work = copy.deepcopy(model)
    calls0 = work.text_calls
    omega = attach(strategy, work, rank=ref.rank, ctx_len=ref.ctx_len, seed=ref.seed)
    rng = np.random.default_rng(ref.seed)
    snaps: dict[int, tuple] = {}

    def grab(t):
        if t in wanted:
            snaps[t] = (omega.snapshot(), copy.deepcopy(rng.bit_generator.state))

    grab(0)
    stage_one(work, omega, task, ref, max(wanted), rng, grab)
    work.freeze_all()

    protocol = "base-to-novel" if task.novel else "all-to-all"
    results = []
    for cfg, (m, m1, m2) in zip(configs, budgets):
        state, rng_state = snaps[m1]
        omega.load(state)
        run_rng = np.random.default_rng()
        run_rng.bit_generator.state = copy.deepcopy(rng_state)
        work.text_calls = calls0
        classifier = init_classifier(work, task.base)
        stage_two(work, classifier, task, cfg, m2, run_rng)
        metrics = evaluate(protocol, work, classifier, task)
        results.append(AdaptResult(omega=omega.snapshot(), classifier=classifier,
                                   curve=DynamicsCurve(strategy=strategy), metrics=metrics,
                                   steps=m, m1=m1, m2=m2))
    return results


def _rows(param_values, results) -> list[SweepRow]:
    return [SweepRow(float(p), r.metrics.base_acc, r.metrics.novel_acc, r.metrics.hm,
                     r.m1 + r.m2, r.m1, r.metrics.text_encoder_calls)
            for p, r in zip(param_values, results)]


def sweep_alpha(model, task, config: AdaptConfig, grid, strategy: str | None = None) -> SweepResult:
    """2SFS at every alpha in ``grid`` (grid order kept) with M fixed."""
    grid = [float(a) for a in grid]
    if not grid:
        raise ArgumentError("empty alpha grid")
    configs = [config.replace(alpha=a) for a in grid]
    return SweepResult("alpha", _rows(grid, run_2sfs_family(model, task, configs, strategy)))


def sweep_budget(model, task, config: AdaptConfig, grid, strategy: str | None = None) -> SweepResult:
    """2SFS at every M in ``grid`` with alpha fixed; rows carry m = M * k."""
    grid = [int(v) for v in grid]
    if not grid:
        raise ArgumentError("empty budget grid")
    if any(v < 1 for v in grid):
        raise ArgumentError("budgets must be positive")
    configs = [config.replace(M=v) for v in grid]
    return SweepResult("budget", _rows(grid, run_2sfs_family(model, task, configs, strategy)))


def parse_grid(text: str) -> list[float]:
    """``"0.1,0.2"`` or ``"start:stop:step"`` (stop inclusive) into a list of floats."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ArgumentError(f"bad range {text!r}; expected start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise ArgumentError("range step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        if n < 1:
            raise ArgumentError(f"empty range {text!r}")
        return [round(start + i * step, 10) for i in range(n)]
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise ArgumentError(f"bad grid {text!r}") from exc

