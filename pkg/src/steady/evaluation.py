"""Test-set metrics, sweeps and plot-data export."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import to_local, wrap_unchecked
from .hovercraft import integrate, sample_initial_states
from .methods import build_model, dataset_for, fit_cached, with_sigma
from .observation import ObservationSequence
from .particle_filter import (
    FilterConfig,
    ParticleDeath,
    filter_forward,
    posterior_means,
    weighted_quantiles,
)
from .trainer import validate

log = logging.getLogger(__name__)

OBSERVATION_FREE = ("hand", "fittruth")
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
METRICS = ("state_loc_rmse", "state_ang_rmse", "fwd_loc_rmse", "fwd_ang_rmse")
METRIC_TITLES = ("state loc (m)", "state ang (rad)", "fwd loc (m)", "fwd ang (rad)")


@dataclass
class MetricReport:
    method: str
    state_loc_rmse: float = float("nan")
    state_ang_rmse: float = float("nan")
    fwd_loc_rmse: float = float("nan")
    fwd_ang_rmse: float = float("nan")
    state_per_traj: list = field(default_factory=list)
    fwd_per_traj: list = field(default_factory=list)
    flagged: list = field(default_factory=list)

    def __post_init__(self):
        for m in METRICS:
            if getattr(self, m) < 0:
                raise ValueError(f"{m} must be non-negative")

    def metrics(self):
        return {m: getattr(self, m) for m in METRICS}


@dataclass
class ErrorSummary:
    loc_rmse: float
    ang_rmse: float
    per_traj: list  # (loc, ang) per trajectory, None where flagged
    flagged: list = field(default_factory=list)


def _pool(loc_sq, ang_sq):
    if not loc_sq:
        return float("nan"), float("nan")
    return (float(np.sqrt(np.mean(np.concatenate(loc_sq)))),
            float(np.sqrt(np.mean(np.concatenate(ang_sq)))))


def pose_sq_errors(est, truth):
    """Squared position and wrapped-heading errors for matching pose rows."""
    est, truth = np.asarray(est), np.asarray(truth)
    loc = np.sum((est[..., :2] - truth[..., :2]) ** 2, axis=-1)
    ang = wrap_unchecked(est[..., 2] - truth[..., 2]) ** 2
    return loc, ang


def subsample_observations(obs: ObservationSequence, stride):
    """Keep only every ``stride``-th observation (starting at step 0)."""
    keep = np.zeros(len(obs), dtype=bool)
    keep[::stride] = True
    present = obs.present & keep
    bearings = np.where(present[:, None], obs.bearings, np.nan)
    return ObservationSequence(bearings, present, obs.sigma, obs.lmap)


def eval_state_estimation(model, items, n_particles=2000, stride=10, seed=0):
    """Filter each trajectory at a reduced observation rate and score posterior means."""
    loc_sq, ang_sq, per, flagged = [], [], [], []
    for i, it in enumerate(items):
        if it.truth is None:
            raise ValueError("state estimation error needs ground truth")
        obs = subsample_observations(it.obs, stride)
        try:
            r = filter_forward(model, obs, it.controls, sample_initial_states,
                               FilterConfig(n_particles, 1.0, seed + i))
        except ParticleDeath as err:
            log.warning("state estimation on test trajectory %d flagged: %s", i, err)
            flagged.append(i)
            per.append(None)
            continue
        l2, a2 = pose_sq_errors(posterior_means(r), it.truth.states)
        loc_sq.append(l2)
        ang_sq.append(a2)
        per.append((float(np.sqrt(l2.mean())), float(np.sqrt(a2.mean()))))
    return ErrorSummary(*_pool(loc_sq, ang_sq), per, flagged)


def rollout_mean(model, states, controls, horizon):
    """Roll mean dynamics from every start index ``t`` with ``t + horizon < T``.

    ``states`` is ``(T, 6)`` and ``controls`` ``(T - 1, 2)``; returns the
    predicted states ``(T - horizon, 6)`` after ``horizon`` steps.
    """
    T = len(states)
    s = np.array(states[:T - horizon].T)
    for k in range(horizon):
        mean, _ = model.accel(s, controls[k:T - horizon + k].T)
        s = integrate(s, mean, model.dt)
    return s.T


def eval_forward_prediction(model, items, horizon=10):
    """Pooled final-pose RMSE of ``horizon``-step mean rollouts from true states."""
    loc_sq, ang_sq, per = [], [], []
    for it in items:
        if it.truth is None:
            raise ValueError("forward prediction error needs ground truth")
        X = it.truth.states
        if horizon >= len(X):
            raise ValueError(f"horizon {horizon} needs trajectories longer than {len(X)} states")
        pred = rollout_mean(model, X, it.controls, horizon)
        l2, a2 = pose_sq_errors(pred, X[horizon:])
        loc_sq.append(l2)
        ang_sq.append(a2)
        per.append((float(np.sqrt(l2.mean())), float(np.sqrt(a2.mean()))))
    return ErrorSummary(*_pool(loc_sq, ang_sq), per)


def evaluate(method, model, items, n_particles=2000, stride=10, horizon=10, seed=0):
    st = eval_state_estimation(model, items, n_particles, stride, seed)
    fw = eval_forward_prediction(model, items, horizon)
    return MetricReport(method, st.loc_rmse, st.ang_rmse, fw.loc_rmse, fw.ang_rmse,
                        st.per_traj, fw.per_traj, st.flagged)


def compare_methods(methods, cfg, cache_dir=None):
    """Fit every method on the configured dataset and score all on its test split.

    Returns ``(reports, fits)`` with ``fits`` mapping method to its result.
    """
    ds = dataset_for(cfg)
    e = cfg.eval
    reports, fits = [], {}
    for m in methods:
        res = fit_cached(m, cfg, cache_dir)
        fits[m] = res
        model = build_model(m, res.params, ds.hov, cfg.train.u_max)
        reports.append(evaluate(m, model, ds.test, e.n_particles, e.stride, e.horizon, e.seed))
    return reports, fits


# ------------------------------------------------------------------ output

def format_table(reports, digits=4):
    """Aligned plain-text table, one row per method."""
    head = ("method",) + METRIC_TITLES
    rows = [head] + [(r.method,) + tuple(f"{getattr(r, m):.{digits}f}" for m in METRICS)
                     for r in reports]
    widths = [max(len(row[j]) for row in rows) for j in range(len(head))]
    lines = ["  ".join(c.ljust(w) if j == 0 else c.rjust(w) for j, (c, w) in enumerate(zip(row, widths)))
             for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report_rows(reports, dataset="hov"):
    return [{"method": r.method, "dataset": dataset, "metric": m, "value": getattr(r, m)}
            for r in reports for m in METRICS]


def write_rows(path, rows, header_lines=()):
    """Write dict rows as a tab-separated file with ``#`` comment header lines."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_rows(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines, delimiter="\t"))


# ------------------------------------------------------------------ sweeps

def _run_cells(fn, cells, jobs):
    if jobs <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, cells))


def _repeat_config(cfg, repeat):
    if repeat == 0:
        return cfg
    return replace(cfg, train=replace(cfg.train, seed=cfg.train.seed + repeat),
                   supervised=replace(cfg.supervised, seed=cfg.supervised.seed + repeat))


def _noise_cell(cell):
    method, level, repeat, cfg, cache_dir = cell
    t0 = time.perf_counter()
    try:
        rcfg = with_sigma(_repeat_config(cfg, repeat), level)
        res = fit_cached(method, rcfg, cache_dir)
        ds = dataset_for(rcfg)
        model = build_model(method, res.params, ds.hov, rcfg.train.u_max)
        fw = eval_forward_prediction(model, ds.test, rcfg.eval.horizon)
        out = {"fwd_loc_rmse": fw.loc_rmse, "fwd_ang_rmse": fw.ang_rmse, "error": ""}
    except Exception as err:  # noqa: BLE001 - a failed cell must not stop the sweep
        log.exception("noise sweep cell %s @ %.2f deg failed", method, level)
        out = {"fwd_loc_rmse": float("nan"), "fwd_ang_rmse": float("nan"), "error": repr(err)}
    out.update(method=method, noise_deg=level, repeat=repeat, wall=time.perf_counter() - t0)
    return out


def noise_sweep(levels_deg, methods, cfg, repeats=1, jobs=1, cache_dir=None):
    """Forward-prediction error of each method at each bearing noise level.

    Observation-free methods (``hand``, ``fittruth``) are fit and scored
    once and their row repeated across levels. Returns long-format rows
    keyed by (method, noise_deg, metric), keeping the best repetition.
    """
    if not levels_deg or not methods:
        raise ValueError("noise levels and methods must be non-empty")
    fixed = [m for m in methods if m in OBSERVATION_FREE]
    varying = [m for m in methods if m not in fixed]
    cells = [(m, levels_deg[0], r, cfg, cache_dir) for m in fixed for r in range(repeats)]
    cells += [(m, lv, r, cfg, cache_dir) for m in varying for lv in levels_deg for r in range(repeats)]
    results = _run_cells(_noise_cell, cells, jobs)

    best = {}
    for res in results:
        key = (res["method"], res["noise_deg"])
        cur = best.get(key)
        if cur is None or _better(res, cur):
            best[key] = res
    rows = []
    for m in methods:
        for lv in levels_deg:
            res = best[(m, levels_deg[0] if m in fixed else lv)]
            for metric in ("fwd_loc_rmse", "fwd_ang_rmse"):
                rows.append({"method": m, "noise_deg": lv, "metric": metric,
                             "value": res[metric], "error": res["error"]})
    return rows


def _better(a, b):
    va, vb = a["fwd_loc_rmse"], b["fwd_loc_rmse"]
    if np.isnan(vb):
        return not np.isnan(va)
    return va < vb


def particle_config(cfg, n):
    """Training config of one particle-sweep cell."""
    tcfg = replace(cfg.train, n_particles=n)
    steps = cfg.sweep.particle_max_steps
    if steps is not None:
        tcfg = replace(tcfg, max_steps=steps, anneal_steps=min(tcfg.anneal_steps, steps // 2))
    return replace(cfg, train=tcfg)


def _particle_cell(cell):
    n, cfg, cache_dir = cell
    pcfg = particle_config(cfg, n)
    res = fit_cached("steady", pcfg, cache_dir)
    # training-time scores use each run's own N, and the log-marginal
    # estimator is biased low for small N; rescore at one shared N
    common = validate(res.params, dataset_for(pcfg).valid, pcfg.train, n_particles=cfg.eval.n_particles)
    return {"n_particles": n, "history": res.history, "best_common": common}


def learning_curve(history):
    """Validation score against step and cumulative wall time from a run history."""
    wall, rows = 0.0, []
    for h in history:
        wall += h["wall"]
        if h["kind"] == "valid":
            rows.append({"step": h["step"], "wall": wall, "valid_score": h["valid_score"]})
    return rows


def step_time(history):
    """Mean wall time of an EM step."""
    w = [h["wall"] for h in history if h["kind"] == "train"]
    return float(np.mean(w)) if w else float("nan")


def particle_sweep(counts, cfg, jobs=1, cache_dir=None):
    """Train STEADY once per particle count on shared data and seed.

    Returns ``{N: {"curve": [...], "step_time": s, "best": score,
    "best_common": score}}`` where ``best`` is the best training-time
    validation score and ``best_common`` rescores the best parameters with
    ``cfg.eval.n_particles`` particles so counts are compared on one scale.
    """
    if len(counts) < 2:
        raise ValueError("particle sweep needs at least two particle counts")
    out = {}
    for res in _run_cells(_particle_cell, [(n, cfg, cache_dir) for n in counts], jobs):
        curve = learning_curve(res["history"])
        out[res["n_particles"]] = {"curve": curve, "step_time": step_time(res["history"]),
                                   "best": max(r["valid_score"] for r in curve),
                                   "best_common": res["best_common"]}
    return out


def particle_sweep_rows(result):
    return [{"n_particles": n, "step": r["step"], "wall": r["wall"], "valid_score": r["valid_score"]}
            for n, res in result.items() for r in res["curve"]]


# ------------------------------------------------------------------ posterior export

EXPORT_COLUMNS = (("t", "v_lon_true", "v_lat_true")
                  + tuple(f"v_lon_q{int(q * 100):02d}" for q in QUANTILES)
                  + tuple(f"v_lat_q{int(q * 100):02d}" for q in QUANTILES))


def posterior_velocity_export(model, item, n_particles=2000, seed=0, stride=1):
    """Per-step filtered quantiles of body-frame velocities next to the truth.

    Returns a ``(T, 13)`` array with columns ``EXPORT_COLUMNS``; truth
    columns are NaN when the trajectory has no ground truth.
    """
    obs = item.obs if stride == 1 else subsample_observations(item.obs, stride)
    r = filter_forward(model, obs, item.controls, sample_initial_states,
                       FilterConfig(n_particles, 1.0, seed))
    cloud = r.cloud
    T = len(cloud)
    out = np.full((T, len(EXPORT_COLUMNS)), np.nan)
    out[:, 0] = np.arange(T) * item.dt
    if item.truth is not None:
        X = item.truth.states
        out[:, 1], out[:, 2] = to_local(X[:, 2], np.stack([X[:, 3], X[:, 4]]))
    q = np.asarray(QUANTILES)
    for t in range(T):
        s = cloud.states[t]
        v_lon, v_lat = to_local(s[2], np.stack([s[3], s[4]]))
        out[t, 3:8] = weighted_quantiles(v_lon, cloud.log_weights[t], q)
        out[t, 8:13] = weighted_quantiles(v_lat, cloud.log_weights[t], q)
    return out


def write_columns(path, table, columns=EXPORT_COLUMNS, header_lines=()):
    head = "\n".join(list(header_lines) + ["\t".join(columns)])
    np.savetxt(path, table, delimiter="\t", header=head, fmt="%.6g")
