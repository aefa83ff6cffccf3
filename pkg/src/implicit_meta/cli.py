"""Command-line harness: one subcommand per experimental protocol."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import model as M
from .config import COMMANDS, ConfigError, ExperimentConfig, default_config, emit, parse, with_schedule
from .data import Dataset, IdxFormatError, downsample_dataset, load_idx, subsample, synth_blobs
from .hypergrad import ApproxSpec
from .metaopt import (
    EpochRecord,
    MlpProblem,
    RunMetrics,
    Schedule,
    ablation_configs,
    grid_search_baseline,
    run,
    train_fixed,
)
from .ssl import gen_ssl_toy, run_ssl_toy

log = logging.getLogger("implicit_meta")

DATA_DIR_ENV = "IMPLICIT_META_DATA_DIR"
RESULT_COLUMNS = ("name", "seed", "method", "train_acc", "val_acc", "test_acc", "es_test_acc", "best_val_epoch",
                  "epoch_time_ns_mean", "approx_time_ns_mean", "approx_allocs")
COMPARISON_COLUMNS = ("name", "seed", "meta_epoch", "method", "rel_l2_error", "cosine_similarity", "exact_stable")
BASELINE_COLUMNS = ("seed", "l2", "train_acc", "val_acc", "test_acc")
SSL_COLUMNS = ("seed", "cn_in_band_fraction", "cn_warmup_complete", "meta_updates", "best_meta_update",
               "mean_weight_in", "mean_weight_ood", "mean_weight_original", "mean_weight_weak",
               "test_acc_with_cn", "test_acc_uniform", "unstable")
WEIGHT_COLUMNS = ("instance_id", "is_ood", "weight_original", "weight_weak_augmented")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])
    return path


def result_row(m: RunMetrics, timings: bool = True) -> dict:
    last = m.last
    return {
        "name": m.name,
        "seed": m.seed,
        "method": m.method,
        "train_acc": last.train_acc if last else float("nan"),
        "val_acc": last.val_acc if last else float("nan"),
        "test_acc": m.final_test_acc,
        "es_test_acc": m.es_test_acc,
        "best_val_epoch": m.best_val_epoch,
        "epoch_time_ns_mean": m.mean_of("epoch_time_ns") if timings else 0,
        "approx_time_ns_mean": m.mean_of("approx_time_ns") if timings else 0,
        "approx_allocs": last.approx_allocs if last else 0,
    }


def write_results_csv(runs, path, timings: bool = True):
    """One row per run in the given order. ``timings=False`` zeroes wall-clock columns."""
    return _write_csv(path, RESULT_COLUMNS, (result_row(m, timings) for m in runs))


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(emit(cfg).encode()).hexdigest()[:16]


def save_checkpoint(path, metrics: RunMetrics, problem: MlpProblem, cfg: ExperimentConfig):
    ck = metrics.checkpoint
    if ck is None:
        return None
    params = problem.params(ck.w)
    hypers = problem.hypers(ck.lam)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, W1=params.W1, b1=params.b1, W2=params.W2, b2=params.b2, lam=ck.lam,
             hyper_mode=hypers.mode.value, epoch=ck.epoch, config_hash=config_hash(cfg))
    return path


def load_checkpoint(path):
    with np.load(path) as z:
        params = M.MlpParams(z["W1"], z["b1"], z["W2"], z["b2"])
        mode = M.HyperMode(str(z["hyper_mode"]))
        hypers = M.HyperSet.constant(mode, params, 0.0).like(z["lam"])
        return params, hypers, int(z["epoch"]), str(z["config_hash"])


def metrics_to_json(m: RunMetrics) -> dict:
    return {
        "name": m.name, "seed": m.seed, "method": m.method,
        "records": [dataclasses.asdict(r) for r in m.records],
        "best_val_epoch": m.best_val_epoch, "best_val_loss": m.best_val_loss,
        "final_test_acc": m.final_test_acc, "es_test_acc": m.es_test_acc, "es_epoch": m.es_epoch,
        "es_stop_epoch": m.es_stop_epoch,
        "final_lambda": None if m.final_lam is None else m.final_lam.tolist(),
        "warmup_trajectory": m.warmup_trajectory,
        "meta_update_positions": m.meta_update_positions,
        "comparisons": [dataclasses.asdict(c) for c in m.comparisons],
        "unstable": m.unstable, "failed_epoch": m.failed_epoch, "failure": m.failure,
    }


def load_dataset(cfg: ExperimentConfig, data_dir: str | None) -> Dataset:
    src = cfg.data
    if src.kind == "idx":
        base = Path(data_dir) if data_dir else Path(".")
        images = Path(src.images or "train-images-idx3-ubyte")
        labels = Path(src.labels or "train-labels-idx1-ubyte")
        ds = load_idx(images if images.is_absolute() else base / images,
                      labels if labels.is_absolute() else base / labels)
    else:
        ds = synth_blobs(src.blob_seed, src.n_per_class, src.num_classes, src.dim, src.spread, src.separation,
                         layout=src.layout)
    return downsample_dataset(ds) if src.downsample else ds


def build_problem(cfg: ExperimentConfig, data_dir: str | None) -> MlpProblem:
    train, val, test = subsample(load_dataset(cfg, data_dir), cfg.split)
    return MlpProblem(train, val, test, hidden=cfg.meta.hidden, mode=cfg.meta.hyper_mode)


def _summary(runs) -> str:
    by_method: dict[str, list[RunMetrics]] = {}
    for m in runs:
        by_method.setdefault(f"{m.name} {m.method}", []).append(m)
    lines = []
    for key, group in by_method.items():
        test = np.array([m.final_test_acc for m in group])
        es = [m.es_test_acc for m in group if m.es_test_acc is not None]
        line = f"{key}: test {100 * test.mean():.2f}±{100 * test.std():.2f}"
        if es:
            line += f"  es-test {100 * np.mean(es):.2f}±{100 * np.std(es):.2f}"
        lines.append(line)
    return "\n".join(lines)


def _plot_runs(runs, out: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for m in runs:
        epochs = [r.epoch for r in m.records]
        label = f"{m.method} s{m.seed}"
        ax1.plot(epochs, [r.val_loss for r in m.records], label=label)
        ax2.plot(epochs, [r.train_loss for r in m.records], label=label)
    ax1.set(xlabel="meta-epoch", ylabel="validation loss")
    ax2.set(xlabel="meta-epoch", ylabel="training loss")
    ax1.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "trajectories.svg")
    plt.close(fig)


def _plot_ssl(reports, out: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(reports), figsize=(4 * len(reports), 3.5), squeeze=False)
    for ax, r in zip(axes[0], reports):
        ax.hist(r.weight_original[~r.ood_mask], bins=30, alpha=0.6, label="in-distribution")
        ax.hist(r.weight_original[r.ood_mask], bins=30, alpha=0.6, label="OOD")
        ax.set(title=f"seed {r.seed}", xlabel="CN weight")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "cn_weights.svg")
    plt.close(fig)


def _baseline_metrics(problem: MlpProblem, cfg: ExperimentConfig, seed: int) -> RunMetrics:
    meta = replace(cfg.meta, seed=seed)
    steps = meta.warmup_steps + meta.meta_updates * meta.inner_steps
    w, lam = train_fixed(problem, meta, 0.0, steps)
    ev = problem.evaluate(w, lam)
    rec = EpochRecord(0, ev["train_loss"], ev["val_loss"], ev["train_acc"], ev["val_acc"], 0, 0, 0)
    return RunMetrics(name="baseline", seed=seed, method="No-Reg", records=[rec], best_val_epoch=0,
                      best_val_loss=ev["val_loss"], final_test_acc=problem.test_accuracy(w), final_w=w, final_lam=lam)


def _run_bilevel_command(cfg: ExperimentConfig, args, out: Path) -> list[RunMetrics]:
    problem = build_problem(cfg, args.data_dir)
    metas = [cfg.meta]
    if cfg.command == "ablation-steps":
        if cfg.meta.schedule == Schedule.T1T2:
            # same total inner steps per setting, one identity meta step after each
            n = cfg.meta.meta_updates // cfg.meta.eval_every
            metas = [replace(cfg.meta, meta_updates=n * s, eval_every=s) for s in cfg.protocol.ablation_steps]
        else:
            metas = ablation_configs(cfg.meta, cfg.protocol.ablation_steps, cfg.meta.meta_updates)
    if cfg.command == "hessian-compare":
        metas = [replace(cfg.meta, compare_specs=cfg.protocol.compare_methods)]
    runs = []
    for i, meta in enumerate(metas):
        name = cfg.command
        if cfg.command == "ablation-steps":
            name = f"inner{cfg.protocol.ablation_steps[i]}"
        for seed in cfg.seeds:
            log.info("%s seed %d (%s)", name, seed, meta.method)
            m = run(replace(meta, seed=seed), problem, name)
            if m.unstable:
                log.warning("%s seed %d unstable at meta-step %s: %s", name, seed, m.failed_epoch, m.failure)
            runs.append(m)
            save_checkpoint(out / "checkpoints" / f"{name}_{meta.method}_{seed}.npz", m, problem, cfg)
    if cfg.protocol.with_baseline:
        runs.extend(_baseline_metrics(problem, cfg, seed) for seed in cfg.seeds)
    write_results_csv(runs, out / "results.csv", timings=not args.no_timings)
    if cfg.command == "hessian-compare":
        rows = ({"name": m.name, "seed": m.seed, **dataclasses.asdict(c)} for m in runs for c in m.comparisons)
        _write_csv(out / "comparisons.csv", COMPARISON_COLUMNS, rows)
    if args.json:
        (out / "runs.json").write_text(json.dumps([metrics_to_json(m) for m in runs], indent=1))
    if args.plots:
        _plot_runs(runs, out)
    print(_summary(runs))
    return runs


def _run_baseline_grid(cfg: ExperimentConfig, args, out: Path):
    problem = build_problem(cfg, args.data_dir)
    rows = []
    for seed in cfg.seeds:
        for r in grid_search_baseline(cfg.protocol.l2_grid, problem, cfg.protocol.baseline_steps,
                                      replace(cfg.meta, seed=seed)):
            rows.append({"seed": seed, **dataclasses.asdict(r)})
            print(f"seed {seed} l2 {r.l2:g}: train {r.train_acc:.3f} val {r.val_acc:.3f} test {r.test_acc:.3f}")
    _write_csv(out / "baseline.csv", BASELINE_COLUMNS, rows)
    return rows


def _run_ssl(cfg: ExperimentConfig, args, out: Path):
    reports = []
    rows = []
    for seed in cfg.seeds:
        data = gen_ssl_toy(seed, **dataclasses.asdict(cfg.ssl_data))
        r = run_ssl_toy(replace(cfg.ssl, seed=seed), data)
        reports.append(r)
        _write_csv(out / f"weights_seed{seed}.csv", WEIGHT_COLUMNS, r.weight_rows())
        rows.append({
            "seed": seed, "cn_in_band_fraction": r.warmup.in_band_fraction, "cn_warmup_complete": r.warmup.complete,
            "meta_updates": r.meta_updates, "best_meta_update": r.best_meta_update,
            "mean_weight_in": r.mean_weight_in, "mean_weight_ood": r.mean_weight_ood,
            "mean_weight_original": r.mean_weight_original, "mean_weight_weak": r.mean_weight_weak,
            "test_acc_with_cn": r.test_acc_with_cn, "test_acc_uniform": r.test_acc_uniform, "unstable": r.unstable,
        })
        print(f"seed {seed}: CN weight in {r.mean_weight_in:.3f} OOD {r.mean_weight_ood:.3f}; "
              f"test with CN {r.test_acc_with_cn:.3f} uniform {r.test_acc_uniform:.3f}")
    _write_csv(out / "ssl_summary.csv", SSL_COLUMNS, rows)
    if args.json:
        (out / "ssl.json").write_text(json.dumps(rows, indent=1))
    if args.plots:
        _plot_ssl(reports, out)
    return reports


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="implicit-meta", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "overfit-val": "per-parameter lambda on a tiny validation split",
        "per-layer": "four-scalar lambda with warm-up, versus a no-regularization baseline",
        "hessian-compare": "approximate vs exact inverse-HVP along one trajectory",
        "ablation-steps": "vary inner steps between meta-updates",
        "baseline-grid": "uniform L2 grid search",
        "ssl-toy": "confidence-network weighting on a toy semi-supervised problem",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, help="INI config file")
        p.add_argument("--seeds", help="comma-separated seeds, e.g. 231,981,1110")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--json", action="store_true", help="also write full run records as JSON")
        p.add_argument("--plots", action="store_true", help="write SVG plots")
        p.add_argument("--no-timings", action="store_true", help="write zeros in wall-clock columns")
        p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
        if name != "ssl-toy":
            p.add_argument("--schedule", choices=[s.value for s in Schedule])
            p.add_argument("--approx", help="neumann:K[:alpha[:scaled]], cg:K, identity or exact")
            p.add_argument("--meta-updates", type=int)
            p.add_argument("--hidden", type=int)
            p.add_argument("--downsample", action="store_true", help="2x2 average-pool square images")
            p.add_argument("--images", help="IDX image file (relative paths resolve against the data dir)")
            p.add_argument("--labels", help="IDX label file")
            p.add_argument("--data-dir", default=os.environ.get(DATA_DIR_ENV),
                           help=f"dataset directory (default ${DATA_DIR_ENV})")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = default_config(args.command)
    if args.config:
        cfg = parse(args.config.read_text(), base=cfg)
        if cfg.command != args.command:
            raise ConfigError(f"config is for {cfg.command!r}, not {args.command!r}")
    if args.seeds:
        try:
            cfg = replace(cfg, seeds=tuple(int(s) for s in args.seeds.split(",") if s.strip()))
        except ValueError as exc:
            raise ConfigError(f"bad --seeds {args.seeds!r}") from exc
    if args.out:
        cfg = replace(cfg, out_dir=str(args.out))
    if args.command == "ssl-toy":
        return cfg
    meta = cfg.meta
    if args.approx:
        meta = replace(meta, approx=ApproxSpec.parse(args.approx))
    if args.meta_updates is not None:
        meta = replace(meta, meta_updates=args.meta_updates)
    if args.hidden is not None:
        meta = replace(meta, hidden=args.hidden)
    cfg = replace(cfg, meta=meta)
    data = cfg.data
    if args.downsample:
        data = replace(data, downsample=True)
    if args.images or args.labels:
        data = replace(data, kind="idx", images=args.images or "", labels=args.labels or "")
    cfg = replace(cfg, data=data)
    if args.schedule:
        cfg = with_schedule(cfg, Schedule(args.schedule))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            print(emit(cfg), end="")
            return 0
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(emit(cfg))
        if args.command == "ssl-toy":
            _run_ssl(cfg, args, out)
        elif args.command == "baseline-grid":
            _run_baseline_grid(cfg, args, out)
        else:
            _run_bilevel_command(cfg, args, out)
    except (ConfigError, IdxFormatError, FileNotFoundError, ValueError) as exc:
        print(f"implicit-meta {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
