"""Command-line entry point: ``steady <command> ...``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a configuration
error. ``STEADY_OUTPUT_DIR`` overrides the configured output directory
and ``STEADY_JOBS`` sets the default sweep parallelism.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .artifacts import (
    base_meta,
    load_checkpoint,
    load_train_state,
    save_checkpoint,
    save_hand_marker,
)
from .config import ConfigError, RunConfig, full_scale, load_config, save_config
from .data import load_dataset, save_dataset
from .evaluation import (
    EXPORT_COLUMNS,
    evaluate,
    format_table,
    noise_sweep,
    particle_sweep,
    particle_sweep_rows,
    posterior_velocity_export,
    report_rows,
    write_columns,
    write_rows,
)
from .methods import METHODS, build_model, dataset_for, run_method, train_config_for
from .trainer import TrainingError, w_obs_at

log = logging.getLogger("steady")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class CommandError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers

def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else (full_scale() if args.full_scale else RunConfig())
    if args.config and args.full_scale:
        raise ConfigError("--full-scale only applies when no --config file is given")
    out = os.environ.get("STEADY_OUTPUT_DIR")
    if args.out:
        out = args.out
    if out:
        cfg = replace(cfg, output_dir=out)
    return cfg


def _out_dir(cfg, *parts):
    d = Path(cfg.output_dir, *parts)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _dataset_path(cfg, args):
    return Path(args.dataset) if getattr(args, "dataset", None) else Path(cfg.output_dir) / "dataset.jsonl"


def _load_dataset(cfg, args, require_match=True):
    path = _dataset_path(cfg, args)
    if not path.exists():
        raise CommandError(f"dataset {path} not found; run `steady simulate` first")
    ds, header = load_dataset(path)
    if require_match and header.get("data_hash") != cfg.data_hash():
        raise CommandError(
            f"dataset {path} was generated with data hash {header.get('data_hash')} but the current "
            f"config has {cfg.data_hash()}; regenerate it or use the matching config")
    return ds, header


def _jobs(args):
    if args.jobs is not None:
        return args.jobs
    return int(os.environ.get("STEADY_JOBS", "1"))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands

def cmd_init_config(args):
    cfg = full_scale() if args.full_scale else RunConfig()
    if args.output:
        save_config(cfg, args.output)
        print(f"wrote {args.output}")
    else:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def cmd_simulate(args):
    cfg = _config(args)
    ds = dataset_for(cfg)
    path = _out_dir(cfg) / "dataset.jsonl"
    extra = {"config_hash": cfg.hash(), "data_hash": cfg.data_hash(), "code_version": __version__}
    save_dataset(ds, path, include_truth=not args.no_truth, header_extra=extra)
    for split, items in ds.splits().items():
        n_obs = sum(int(it.obs.present.sum()) for it in items)
        print(f"{split}: {len(items)} trajectories of {len(items[0])} states, {n_obs} observed steps")
    print(f"wrote {path} (data hash {cfg.data_hash()})")


def _history_path(d):
    return d / "history.jsonl"


def cmd_train(args):
    cfg = _config(args)
    ds, _ = _load_dataset(cfg, args)
    method = args.method
    tcfg = train_config_for(method, cfg)
    d = _out_dir(cfg, method)
    state_path, best_path, hist_path = d / "train_state.npz", d / "best.npz", _history_path(d)
    meta = base_meta(method, cfg)

    run = None
    if args.resume:
        if not state_path.exists():
            raise CommandError(f"nothing to resume: {state_path} does not exist")
        history = [json.loads(ln) for ln in hist_path.read_text().splitlines()] if hist_path.exists() else []
        run, old = load_train_state(state_path, history)
        if old.get("config_hash") != cfg.hash():
            raise CommandError(f"checkpoint {state_path} was written under config hash "
                               f"{old.get('config_hash')}, not {cfg.hash()}; refusing to resume")
        run.w_obs = w_obs_at(run.step, tcfg.anneal_steps)
        if best_path.exists():
            run.best_params = load_checkpoint(best_path)[0]
        print(f"resuming {method} at step {run.step}")

    def on_check(r, best):
        save_checkpoint(state_path, r.params, meta, adam=r.adam, step=r.step)
        save_checkpoint(best_path, best, meta)
        hist_path.write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in r.history))

    try:
        res = run_method(method, ds, cfg, on_check=on_check, run=run)
    except TrainingError as err:
        if err.run is not None:
            hist_path.write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in err.run.history))
        raise CommandError(f"training failed: {err}") from err
    on_check(res.run, res.params)
    print(f"{method}: {res.run.step} steps, best validation score {res.info['best_valid']:.4f}")
    print(f"wrote {best_path}")


def cmd_baseline(args):
    cfg = _config(args)
    ds, _ = _load_dataset(cfg, args)
    method = args.method
    d = _out_dir(cfg, method)
    if method == "fittruth" and any(it.truth is None for it in ds.train):
        raise CommandError("fittruth needs ground-truth states; the dataset holds observations only")
    res = run_method(method, ds, cfg)
    meta = base_meta(method, cfg, **{k: v for k, v in res.info.items() if k != "analytic"})
    if method == "hand":
        path = d / "model.json"
        save_hand_marker(path, meta, ds.hov)
    else:
        path = d / "best.npz"
        save_checkpoint(path, res.params, meta)
    print(f"wrote {path}")


def _load_model(path, cfg, data_hash, hov):
    params, meta = load_checkpoint(path)
    if meta.get("data_hash") != data_hash:
        raise CommandError(
            f"{path} was trained on data hash {meta.get('data_hash')} but the evaluation dataset "
            f"has {data_hash}; metrics across different datasets are not comparable")
    method = meta.get("method", Path(path).parent.name)
    return method, build_model(method, params, hov, cfg.train.u_max), meta


def cmd_eval(args):
    cfg = _config(args)
    ds, header = _load_dataset(cfg, args, require_match=False)
    e = cfg.eval
    n = args.particles or e.n_particles
    reports = []
    for path in args.checkpoints:
        method, model, _ = _load_model(path, cfg, header.get("data_hash"), ds.hov)
        reports.append(evaluate(method, model, ds.test, n, e.stride, e.horizon, e.seed))
    d = _out_dir(cfg, "eval")
    table = format_table(reports)
    print(table)
    hdr = [f"config_hash {cfg.hash()}", f"data_hash {header.get('data_hash')}",
           f"code_version {__version__}", f"seed {e.seed}"]
    (d / "report.txt").write_text("\n".join(f"# {h}" for h in hdr) + "\n" + table + "\n")
    write_rows(d / "report.tsv", report_rows(reports), hdr)
    _write_json(d / "per_trajectory.json",
                {r.method: {"state": r.state_per_traj, "fwd": r.fwd_per_traj, "flagged": r.flagged}
                 for r in reports})
    print(f"wrote {d / 'report.tsv'}")


def cmd_sweep(args):
    cfg = _config(args)
    jobs = _jobs(args)
    if args.repeats is not None:
        cfg = replace(cfg, sweep=replace(cfg.sweep, repeats=args.repeats))
    d = _out_dir(cfg, "sweep")
    hdr = [f"config_hash {cfg.hash()}", f"code_version {__version__}", f"seed {cfg.train.seed}"]
    if args.noise is not None:
        levels = tuple(args.noise) or cfg.sweep.noise_levels_deg
        methods = tuple(args.methods) if args.methods else cfg.sweep.noise_methods
        rows = noise_sweep(list(levels), list(methods), cfg, cfg.sweep.repeats, jobs, d / "cells")
        write_rows(d / "noise.tsv", rows, hdr)
        _print_noise(rows, levels, methods)
        failed = [r for r in rows if r["error"]]
        print(f"wrote {d / 'noise.tsv'}" + (f" ({len(failed) // 2} failed cells)" if failed else ""))
    else:
        counts = tuple(args.particles) or cfg.sweep.particle_counts
        res = particle_sweep(list(counts), cfg, jobs, d / "cells")
        write_rows(d / "particles.tsv", particle_sweep_rows(res), hdr)
        for n, r in res.items():
            print(f"N={n:>7d}  step time {r['step_time'] * 1e3:8.2f} ms  best validation {r['best']:.4f}"
                  f"  (rescored at N={cfg.eval.n_particles}: {r['best_common']:.4f})")
        print(f"wrote {d / 'particles.tsv'}")


def _print_noise(rows, levels, methods):
    val = {(r["method"], float(r["noise_deg"])): r["value"] for r in rows if r["metric"] == "fwd_loc_rmse"}
    head = ["method"] + [f"{lv:g} deg" for lv in levels]
    lines = [head] + [[m] + [f"{val[(m, float(lv))]:.4f}" for lv in levels] for m in methods]
    w = [max(len(r[j]) for r in lines) for j in range(len(head))]
    for r in lines:
        print("  ".join(c.ljust(w[0]) if j == 0 else c.rjust(w[j]) for j, c in enumerate(r)))


def cmd_export_posterior(args):
    cfg = _config(args)
    ds, header = _load_dataset(cfg, args, require_match=False)
    items = ds.splits()[args.split]
    if not 0 <= args.traj < len(items):
        raise CommandError(f"trajectory id {args.traj} out of range for {args.split} ({len(items)} trajectories)")
    method, model, _ = _load_model(args.checkpoint, cfg, header.get("data_hash"), ds.hov)
    table = posterior_velocity_export(model, items[args.traj], args.particles or cfg.eval.n_particles,
                                      cfg.eval.seed, args.stride)
    d = _out_dir(cfg, "posterior")
    path = d / f"{method}_{args.split}{args.traj}.tsv"
    hdr = [f"config_hash {cfg.hash()}", f"data_hash {header.get('data_hash')}",
           f"code_version {__version__}", f"seed {cfg.eval.seed}", f"method {method}"]
    write_columns(path, table, EXPORT_COLUMNS, hdr)
    print(f"wrote {path} ({len(table)} rows)")


# ------------------------------------------------------------------ parser

def _common(p):
    p.add_argument("--config", help="JSON run config (defaults used when omitted)")
    p.add_argument("--full-scale", action="store_true", help="start from the larger original-experiment defaults")
    p.add_argument("--out", help="output directory (overrides config and STEADY_OUTPUT_DIR)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="steady", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="print or write a config with every default filled in")
    p.add_argument("-o", "--output")
    p.add_argument("--full-scale", action="store_true")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("simulate", help="generate the train/valid/test dataset file")
    _common(p)
    p.add_argument("--no-truth", action="store_true", help="omit ground-truth states")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="Monte Carlo EM training")
    _common(p)
    p.add_argument("--method", choices=("steady", "steady-minus"), default="steady")
    p.add_argument("--dataset")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", help="fit a baseline model")
    _common(p)
    p.add_argument("--method", choices=("hand", "fithand", "fittv", "fittruth"), required=True)
    p.add_argument("--dataset")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="score checkpoints on the test split")
    _common(p)
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--dataset")
    p.add_argument("--particles", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="observation-noise or particle-count sweep")
    _common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--noise", nargs="*", type=float, metavar="DEG")
    g.add_argument("--particles", nargs="*", type=int, metavar="N")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--repeats", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-posterior", help="posterior velocity quantiles for plotting")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--traj", type=int, default=0)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--dataset")
    p.add_argument("--particles", type=int)
    p.add_argument("--stride", type=int, default=1)
    p.set_defaults(func=cmd_export_posterior)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (CommandError, OSError, ValueError, RuntimeError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
