"""Acceptance criteria 1 to 10, one test each.

Every test prints a ``criterion N: PASS|FAIL ...`` line (also collected in
the terminal summary). Criteria 1 to 5 are fast oracle checks; 6 to 10 run
desk-scale experiments that share fitted models through a cache directory.
Set ``STEADY_ACCEPTANCE_CACHE`` to a directory to keep fits across sessions.
"""

import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_KEY
from oracles import LGModelAdapter, LGObservations, LinearGaussian1D, hover_log_density_batched
from steady.baselines import TvConfig, finite_difference_velocities, tv_solve, tv_velocities
from steady.config import RunConfig
from steady.evaluation import compare_methods, eval_forward_prediction, noise_sweep, particle_sweep
from steady.geometry import Vec2, circular_mean, from_local, to_local, wrap_angle
from steady.methods import build_model, dataset_for, fit_cached, with_sigma
from steady.neural import DynamicsParams, grad_log_density, softplus, step_model
from steady.observation import LandmarkMap, bearing, log_likelihood
from steady.particle_filter import (
    FilterConfig,
    filter_forward,
    posterior_means,
    sample_trajectories,
    systematic_resample,
)


@pytest.fixture
def verdict(request):
    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.stash[ACCEPTANCE_KEY][n] = line
        assert ok, line
    return record


# ------------------------------------------------------------------ oracle suite

def test_criterion_1_gradient(verdict):
    rng = np.random.default_rng(100)
    dt, h, worst = 0.1, 1e-6, 0.0
    t0 = time.perf_counter()
    for _ in range(50):
        p = DynamicsParams(**{k: 0.4 * rng.normal(size=s) for k, s in DynamicsParams.SHAPES.items()})
        n = int(rng.integers(1, 9))
        s = rng.normal(size=(6, n))
        s[2] = rng.uniform(-np.pi, np.pi, n)
        c = rng.uniform(0, 1, (2, n))
        s_next, _ = step_model(p, s, c, dt, rng=rng)
        _, grad = grad_log_density(p, s, c, s_next, dt)
        flat, an = p.flat(), grad.flat()
        # central differences of an independent vectorized re-derivation
        steps = h * np.eye(len(flat))
        both = hover_log_density_batched(np.vstack([flat + steps, flat - steps]),
                                         DynamicsParams.SHAPES, s, c, s_next, dt)
        fd = (both[:len(flat)] - both[len(flat):]) / (2 * h)
        # relative error per component; the floor keeps components that are
        # zero up to rounding from dividing central-difference noise by ~0
        rel = np.abs(an - fd) / np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-3)
        worst = max(worst, rel.max())
    wall = time.perf_counter() - t0
    verdict(1, worst < 1e-4 and wall < 10, f"max relative error {worst:.2e} over 50 instances, {wall:.1f} s")


def test_criterion_2_filter_vs_kalman(verdict):
    sys_ = LinearGaussian1D()
    model = LGModelAdapter(sys_)
    t0 = time.perf_counter()

    def problem(seed, T=25):
        _, u, y = sys_.simulate(T, np.random.default_rng(seed))
        return u[:, None], LGObservations(sys_, y), y

    def run(obs, u, n, seed):
        return filter_forward(model, obs, u, model.init_sampler, FilterConfig(n, 1.0, seed))

    u, obs, y = problem(0)
    exact = sys_.kalman(u[:, 0], y)[4]
    est = np.mean([run(obs, u, 10_000, s).log_marginal for s in range(20)])
    a_err = abs(est - exact) / abs(exact)

    u, obs, y = problem(1)
    mf = sys_.kalman(u[:, 0], y)[0]
    ms = sys_.rts(u[:, 0], y)[0]
    means, traj_means = [], []
    for s in range(20):
        r = run(obs, u, 2000, s)
        means.append(posterior_means(r)[:, 0])
        traj_means.append(sample_trajectories(r, 200, np.random.default_rng(s))[:, :, 0].mean(axis=0))
    means, traj_means = np.array(means), np.array(traj_means)
    z_b = np.abs(means.mean(0) - mf) / (means.std(0, ddof=1) / math.sqrt(20))
    z_c = np.abs(traj_means.mean(0) - ms) / (traj_means.std(0, ddof=1) / math.sqrt(20))
    wall = time.perf_counter() - t0
    ok = a_err <= 0.02 and z_b.max() <= 3 and z_c.max() <= 3 and wall < 60
    verdict(2, ok, f"log-marginal rel err {a_err:.4f}, filtered max |z| {z_b.max():.2f}, "
                   f"smoothed max |z| {z_c.max():.2f}, {wall:.1f} s")


def test_criterion_3_resampling(verdict):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(2, 300))
        w = rng.dirichlet(np.full(n, rng.uniform(0.05, 5)))
        with np.errstate(divide="ignore"):  # dirichlet draws can underflow to zero
            lw = np.log(w)
        counts = np.bincount(systematic_resample(lw, rng), minlength=n)
        bad += not (counts.sum() == n and np.all(counts >= np.floor(n * w)) and np.all(counts <= np.ceil(n * w)))
    with np.errstate(divide="ignore"):
        lw = np.log([0.5, 0.25, 0.25, 0, 0, 0, 0, 0])
    rational = all(tuple(np.bincount(systematic_resample(lw, rng), minlength=8)[:3]) == (4, 2, 2)
                   for _ in range(100))
    wall = time.perf_counter() - t0
    verdict(3, bad == 0 and rational and wall < 5,
            f"{bad} bound violations in 1000 vectors, (4,2,2) counts {'exact' if rational else 'wrong'}, {wall:.2f} s")


def test_criterion_4_geometry_and_observation(verdict):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    theta = rng.uniform(-50, 50, 2000)
    v = Vec2(*rng.normal(size=(2, 2000)) * 10)
    loc = to_local(theta, v)
    iso = np.allclose(np.hypot(*loc), np.hypot(*v), rtol=1e-12)
    inv = np.allclose(from_local(theta, loc), np.stack(v), atol=1e-10)
    a = rng.uniform(-1e4, 1e4, 5000)
    w = wrap_angle(a)
    idem = np.array_equal(wrap_angle(w), w) and np.all((w > -np.pi) & (w <= np.pi))
    lmap = LandmarkMap(rng.uniform(-8, 8, (4, 2)))
    poses = np.vstack([rng.uniform(-1, 1, (2, 200)), rng.uniform(-np.pi, np.pi, 200)])
    obs = np.array([bearing(poses[:, 0], lm) for lm in lmap.positions])
    shift = 2 * np.pi * rng.integers(-5, 6, 4)
    wrap_inv = np.allclose(log_likelihood(obs + shift, poses, lmap, 0.1),
                           log_likelihood(obs, poses, lmap, 0.1), atol=1e-9)
    cm = abs(wrap_angle(circular_mean(np.deg2rad([170.0, -170.0])) - np.pi)) < 1e-12
    # below about -745 the exact value is smaller than the least positive double
    x = np.concatenate([rng.normal(0, 50, 99_000), rng.uniform(-740, 740, 1000)])
    sp = softplus(x)
    pos = np.all(sp > 0) and np.all(np.isfinite(sp))
    wall = time.perf_counter() - t0
    checks = dict(isometry=iso and inv, wrap=idem, bearing_wrap=wrap_inv, circular_mean=cm, softplus=pos)
    failed = [k for k, ok in checks.items() if not ok]
    verdict(4, not failed and wall < 5, f"failed: {failed or 'none'}, {wall:.2f} s")


def test_criterion_5_tv(verdict):
    rng = np.random.default_rng(5)
    dt, T = 0.1, 40
    vel = np.array([0.4, -0.2, 0.3])
    poses = np.array([0.1, -0.3, 0.5]) + dt * np.arange(T)[:, None] * vel
    poses[:, 2] = wrap_angle(poses[:, 2])
    const = np.abs(tv_velocities(poses, dt, TvConfig(lam=1.0))[1:] - vel).max()
    noisy = poses + 0.05 * rng.normal(size=poses.shape)
    zero = np.abs(tv_velocities(noisy, dt, lam=0.0)[1:] - finite_difference_velocities(noisy, dt)).max()
    trace = []
    tv_solve(noisy, dt, TvConfig(iters=100), lam=2.0, trace=trace)
    mono = len(trace) > 2 and np.all(np.diff(trace) <= 1e-12 * abs(trace[0]))
    verdict(5, const < 1e-6 and zero < 1e-6 and mono,
            f"constant-velocity error {const:.1e}, lambda=0 vs FD {zero:.1e}, "
            f"objective {'monotone' if mono else 'NOT monotone'} over {len(trace)} iterations")


# ------------------------------------------------------------------ desk-scale experiments

@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    path = os.environ.get("STEADY_ACCEPTANCE_CACHE")
    return path or str(tmp_path_factory.mktemp("fits"))


@pytest.fixture(scope="session")
def desk(cache_dir):
    cfg = RunConfig()
    t0 = time.perf_counter()
    reports, fits = compare_methods(["hand", "fittruth", "fithand", "fittv", "steady"], cfg, cache_dir)
    return cfg, {r.method: r for r in reports}, fits, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_6_ordering(desk, verdict):
    _, r, fits, wall = desk
    s, hand, tv, fh = r["steady"], r["hand"], r["fittv"], r["fithand"]
    conds = {
        "fwd STEADY<Hand": s.fwd_loc_rmse < hand.fwd_loc_rmse,
        "fwd STEADY<FitTV": s.fwd_loc_rmse < tv.fwd_loc_rmse,
        "fwd STEADY<=1.5xFitHand": s.fwd_loc_rmse <= 1.5 * fh.fwd_loc_rmse,
        "state STEADY<Hand": s.state_loc_rmse < hand.state_loc_rmse,
        "state STEADY<FitTV": s.state_loc_rmse < tv.state_loc_rmse,
    }
    steps = fits["steady"].info["steps"]
    failed = [k for k, ok in conds.items() if not ok]
    detail = (f"fwd loc m: steady {s.fwd_loc_rmse:.4f} hand {hand.fwd_loc_rmse:.4f} fittv {tv.fwd_loc_rmse:.4f} "
              f"fithand {fh.fwd_loc_rmse:.4f}; state loc m: steady {s.state_loc_rmse:.3f} "
              f"hand {hand.state_loc_rmse:.3f} fittv {tv.state_loc_rmse:.3f}; {steps} EM steps; "
              f"wall {wall / 60:.1f} min; failed: {failed or 'none'}")
    verdict(6, not failed and steps <= 5000, detail)


@pytest.mark.slow
def test_criterion_7_fittruth_proximity(desk, verdict):
    r = desk[1]
    s, ft = r["steady"].fwd_loc_rmse, r["fittruth"].fwd_loc_rmse
    verdict(7, s <= 2.0 * ft, f"STEADY fwd loc {s:.4f} m vs FitTruth {ft:.4f} m (ratio {s / ft:.2f}, limit 2.0)")


@pytest.mark.slow
def test_criterion_8_improvement(desk, verdict):
    vals = [(h["step"], h["valid_score"]) for h in desk[2]["steady"].history if h["kind"] == "valid"]
    step0 = dict(vals)[0]
    best_step, best = max(vals, key=lambda v: v[1])
    window = [v for s, v in vals if best_step - 500 < s <= best_step]
    avg = float(np.mean(window))
    verdict(8, best > step0 and avg > step0,
            f"step-0 score {step0:.3f}, best {best:.3f} at step {best_step}, "
            f"500-step moving average there {avg:.3f} over {len(window)} checks")


@pytest.fixture(scope="session")
def noise(desk, cache_dir):
    cfg = desk[0]
    levels = [2.5, 5.0, 10.0, 20.0]
    rows = noise_sweep(levels, ["hand", "fittruth", "steady"], cfg, repeats=1, cache_dir=cache_dir)
    low = with_sigma(cfg, 2.5)
    minus = fit_cached("steady-minus", low, cache_dir)
    ds = dataset_for(low)
    model = build_model("steady-minus", minus.params, ds.hov, low.train.u_max)
    return levels, rows, eval_forward_prediction(model, ds.test, low.eval.horizon).loc_rmse


@pytest.mark.slow
def test_criterion_9_noise_trend(noise, verdict):
    levels, rows, minus_loc = noise
    loc = {(r["method"], r["noise_deg"]): r["value"] for r in rows if r["metric"] == "fwd_loc_rmse"}
    ang = {(r["method"], r["noise_deg"]): r["value"] for r in rows if r["metric"] == "fwd_ang_rmse"}
    errors = [r["error"] for r in rows if r["error"]]
    constant = all(len({loc[(m, lv)] for lv in levels}) == 1 and len({ang[(m, lv)] for lv in levels}) == 1
                   for m in ("hand", "fittruth"))
    trend = loc[("steady", 20.0)] > loc[("steady", 2.5)]
    curve = ", ".join(f"{lv:g} deg {loc[('steady', lv)]:.4f}" for lv in levels)
    print(f"report only: fwd loc at 2.5 deg STEADY- {minus_loc:.4f} m vs STEADY {loc[('steady', 2.5)]:.4f} m")
    verdict(9, trend and constant and not errors,
            f"STEADY fwd loc m: {curve}; Hand/FitTruth constant: {constant}; failed cells: {len(errors)}; "
            f"report only: STEADY- at 2.5 deg {minus_loc:.4f}")


@pytest.fixture(scope="session")
def particles(desk, cache_dir):
    cfg = desk[0]
    cfg = replace(cfg, sweep=replace(cfg.sweep, particle_max_steps=1000))
    return particle_sweep([200, 2000, 20_000], cfg, cache_dir=cache_dir)


@pytest.mark.slow
def test_criterion_10_particle_trend(particles, verdict):
    ratio = particles[20_000]["step_time"] / particles[2000]["step_time"]
    bests = {n: r["best_common"] for n, r in particles.items()}
    scores = [c["valid_score"] for r in particles.values() for c in r["curve"]]
    score_range = max(scores) - min(scores)
    spread = max(bests.values()) - min(bests.values())
    detail = (f"step time ratio N=20000/N=2000 {ratio:.2f} (need >= 5); best scores rescored at N=2000 "
              + ", ".join(f"N={n}: {b:.3f}" for n, b in bests.items())
              + " (training-time: " + ", ".join(f"{r['best']:.3f}" for r in particles.values()) + ")"
              + f"; spread {spread:.3f} vs 10% of range {0.1 * score_range:.3f}")
    verdict(10, ratio >= 5 and spread <= 0.1 * score_range, detail)
