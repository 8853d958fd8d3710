"""Regenerate tests/fixtures/reference_runs.json from the bundled "hard" profile.

Records the single-stage dynamics curves (layernorm, lora, bitfit; seeds 1-5;
evaluation every m/10 steps), their detected breakpoints, the per-seed alpha
sweep and the pretraining report, so regressions in any stage show up as a
fixture mismatch.  Run from the repository root: ``python3 tools/reference_runs.py``.
"""

import copy
import json
from pathlib import Path

from twostage.adapt import run_single_stage
from twostage.config import from_dict
from twostage.dynamics import detect_breakpoint, parse_grid, sweep_alpha
from twostage.experiment import build_task, build_universe_from, pretrain_from

SEEDS = (1, 2, 3, 4, 5)
OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "reference_runs.json"


def main() -> None:
    cfg = from_dict({"profile": "hard", "seeds": list(SEEDS)})
    universe = build_universe_from(cfg)
    model, report = pretrain_from(cfg, universe)
    tasks = {s: build_task(cfg, universe, s) for s in SEEDS}
    single, alpha = {}, {}
    for strategy in ("layernorm", "lora", "bitfit"):
        for seed in SEEDS:
            a = cfg.adapt_for(seed).replace(peft=strategy)
            a = a.replace(eval_interval=a.M * a.k // 10)
            curve = run_single_stage(copy.deepcopy(model), strategy, tasks[seed], a).curve
            bp = detect_breakpoint(curve, window=3, margin=2.0)
            single[f"{strategy}:{seed}"] = {
                "iterations": list(curve.iterations), "base": list(curve.base),
                "novel": list(curve.novel), "breakpoint": None if bp is None else bp.iteration}
    for seed in SEEDS:
        res = sweep_alpha(model, tasks[seed], cfg.adapt_for(seed), parse_grid("0.2:0.8:0.1"))
        alpha[str(seed)] = {"grid": [r.param for r in res.rows], "hm": [r.hm for r in res.rows],
                            "best": res.best.param}
    payload = {"profile": "hard", "config_hash": cfg.config_hash(),
               "pretrain": {k: report[k] for k in ("final_loss", "zero_shot_acc", "universe_digest")},
               "single_stage": single, "alpha_sweep": alpha}
    OUT.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
