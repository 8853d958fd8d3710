"""Command-line entry point: ``twostage <command>``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.
Progress goes to stderr; results go to files under the output directory.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from pathlib import Path

import click

from . import checkpoint, experiment
from .config import OUTPUT_ENV, load_config, with_overrides
from .dynamics import parse_grid
from .errors import ConfigurationError
from .synthdata import save_universe

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _log(msg: str) -> None:
    click.echo(msg, err=True)


def _fail(exc: Exception) -> None:
    code = EXIT_CONFIG if isinstance(exc, (ConfigurationError, click.UsageError)) else EXIT_RUNTIME
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _seeds(text: str | None):
    if not text:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise click.BadParameter(f"seeds must be comma-separated integers, got {text!r}")


def _config(path, **overrides):
    cfg = load_config(path)
    return with_overrides(cfg, **overrides)


config_option = click.option("--config", "config_path", required=True,
                             type=click.Path(exists=True, dir_okay=False),
                             help="YAML experiment config.")
output_option = click.option("--output-dir", default=None,
                             help=f"Output directory (default: config, then ${OUTPUT_ENV}, then ./runs).")


def adapt_options(fn):
    opts = [
        click.option("--checkpoint", "ckpt", required=True, type=click.Path(exists=True, dir_okay=False),
                     help="Pretrained checkpoint from `twostage pretrain`."),
        click.option("--peft", default=None, help="layernorm | lora | bitfit | prompt"),
        click.option("--alpha", type=float, default=None),
        click.option("--M", "M", type=int, default=None, help="Iterations per shot."),
        click.option("--k", type=int, default=None, help="Shots per base class."),
        click.option("--lr", type=float, default=None),
        click.option("--wd", type=float, default=None),
        click.option("--batch", type=int, default=None),
        click.option("--eval-interval", type=int, default=None),
        click.option("--rank", type=int, default=None),
        click.option("--ctx-len", type=int, default=None),
        click.option("--protocol", type=click.Choice(["base-to-novel", "all-to-all"]), default=None),
        click.option("--seeds", default=None, help="Comma-separated seed list (default 1,2,3)."),
        output_option,
        config_option,
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Two-stage few-shot adaptation experiments on synthetic universes."""


@main.command("pretrain")
@config_option
@output_option
def cmd_pretrain(config_path, output_dir):
    """Generate the universe, pretrain the dual encoder and write a checkpoint."""
    try:
        cfg = _config(config_path, output_dir=output_dir)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        model, report = experiment.pretrain_from(cfg, log=_log)
        meta = {"config_hash": cfg.config_hash(), "universe_digest": report["universe_digest"]}
        ckpt = out / "pretrained.ckpt"
        checkpoint.save(ckpt, model, meta=meta)
        report.update(config_hash=cfg.config_hash(), seconds=round(time.perf_counter() - t0, 3),
                      checkpoint=str(ckpt))
        (out / "pretrain.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        _fail(exc)
    click.echo(f"final contrastive loss {report['final_loss']:.4f} "
               f"(initial {report['initial_loss']:.4f})")
    if "zero_shot_acc" in report:
        click.echo(f"zero-shot held-out accuracy {report['zero_shot_acc']:.2f}% "
                   f"(chance {report['chance_acc']:.2f}%)")
    click.echo(f"checkpoint {ckpt}")


def _adapt(method, ckpt, config_path, output_dir, seeds, **overrides):
    try:
        cfg = _config(config_path, output_dir=output_dir, seeds=_seeds(seeds), **overrides)
        universe = experiment.build_universe_from(cfg)
        model = experiment.load_pretrained(ckpt, cfg, universe)
        rec = experiment.run_seeds(cfg, model, universe, method=method, log=_log)
        out = Path(cfg.output_dir) / method
        experiment.write_run(rec, out)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    mean = rec.rows()[-1]
    click.echo(f"{method} over seeds {list(cfg.seeds)}: base {mean['base_acc']:.2f}"
               + ("" if mean["novel_acc"] is None else
                  f" novel {mean['novel_acc']:.2f} hm {mean['hm']:.2f}"))
    click.echo(f"metrics {rec.files['metrics']}")


@main.command("adapt")
@adapt_options
def cmd_adapt(ckpt, config_path, output_dir, seeds, **overrides):
    """Two-stage adaptation (PEFT then classifier) across the seed list."""
    _adapt("2sfs", ckpt, config_path, output_dir, seeds, **overrides)


@main.command("single-stage")
@adapt_options
def cmd_single_stage(ckpt, config_path, output_dir, seeds, **overrides):
    """Plain PEFT for the whole budget (baseline)."""
    _adapt("single-stage", ckpt, config_path, output_dir, seeds, **overrides)


@main.command("sweep")
@click.argument("kind", type=click.Choice(["alpha", "budget"]))
@click.option("--grid", default=None,
              help='"start:stop:step" or comma list; default 0.2:0.8:0.1 (alpha) / 100,300,500 (budget).')
@adapt_options
def cmd_sweep(kind, grid, ckpt, config_path, output_dir, seeds, **overrides):
    """Sweep alpha (M fixed) or the budget M (alpha fixed); one CSV per seed."""
    try:
        values = parse_grid(grid or ("0.2:0.8:0.1" if kind == "alpha" else "100,300,500"))
        if not values:
            raise ConfigurationError("empty grid")
        cfg = _config(config_path, output_dir=output_dir, seeds=_seeds(seeds), **overrides)
        universe = experiment.build_universe_from(cfg)
        model = experiment.load_pretrained(ckpt, cfg, universe)
        results = experiment.run_sweep(cfg, model, universe, kind, values, log=_log)
        out = Path(cfg.output_dir) / f"sweep_{kind}"
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for seed, res in results.items():
            p = out / f"seed{seed}.csv"
            p.write_text(res.to_csv(cfg.config_hash()))
            paths.append(p)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    for seed, res in results.items():
        click.echo(f"seed {seed}: best {kind} {res.best.param:g}")
    click.echo(f"wrote {len(paths)} sweep tables to {out}")


@main.group("data")
def data_group():
    """Synthetic data utilities."""


@data_group.command("gen")
@config_option
@click.option("--out", "out_path", default=None, help="Output .npz (default <output-dir>/data.npz).")
@click.option("--seed", type=int, default=None, help="Task seed (default: first configured seed).")
@output_option
def cmd_data_gen(config_path, out_path, seed, output_dir):
    """Write the configured universe and one few-shot task to an .npz file."""
    try:
        cfg = _config(config_path, output_dir=output_dir)
        universe = experiment.build_universe_from(cfg)
        task = experiment.build_task(cfg, universe, cfg.seeds[0] if seed is None else seed)
        path = Path(out_path) if out_path else Path(cfg.output_dir) / "data.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_universe(path, universe, task)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    click.echo(f"{universe.n_classes} classes, {len(universe.labels)} samples, "
               f"task |B|={len(task.base)} |N|={len(task.novel)} -> {path}")


@main.command("report")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
def cmd_report(run_dir):
    """Summarise every metrics.csv under RUN_DIR (mean rows)."""
    files = sorted(Path(run_dir).rglob("metrics.csv"))
    if not files:
        click.echo(f"error: no metrics.csv under {run_dir}", err=True)
        sys.exit(EXIT_RUNTIME)
    header = f"{'run':<28} {'peft':<10} {'alpha':>6} {'M':>5} {'k':>3} {'base':>7} {'novel':>7} {'hm':>7}"
    click.echo(header)
    for f in files:
        lines = [ln for ln in f.read_text().splitlines() if not ln.startswith("#")]
        for row in csv.DictReader(lines):
            if row["seed"] != "mean":
                continue
            rel = str(f.parent.relative_to(run_dir)) or "."
            click.echo(f"{rel:<28} {row['peft']:<10} {row['alpha']:>6} {row['M']:>5} {row['k']:>3} "
                       f"{row['base_acc'] or '-':>7.7} {row['novel_acc'] or '-':>7.7} {row['hm'] or '-':>7.7}")


if __name__ == "__main__":  # pragma: no cover
    main()
