"""Two-stage baselines: estimate states first, then fit the network supervised.

FitTruth fits ground-truth states, FitHand fits particle-filter estimates
obtained with the Hand model, and FitTV fits observation-only pose
estimates whose velocities come from total-variation regularized
differentiation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import wrap_angle, wrap_unchecked
from .hovercraft import STATE_DIM, sample_initial_states
from .neural import DynamicsParams, grad_log_density, init_params
from .observation import LandmarkMap, bearings
from .particle_filter import FilterConfig, filter_forward, posterior_means
from .trainer import AdamState, adam_update

log = logging.getLogger(__name__)


@dataclass
class SupervisedDataset:
    """Transitions ``(s, c, s_next)`` stored component-first with one batch axis."""

    s: np.ndarray       # (6, K)
    c: np.ndarray       # (2, K)
    s_next: np.ndarray  # (6, K)
    dt: float

    def __len__(self):
        return self.s.shape[1]

    @classmethod
    def from_sequences(cls, sequences, dt):
        """``sequences`` yields ``(states (T, 6), controls (T-1, 2), keep (T-1,) or None)``."""
        s, c, s_next = [], [], []
        for states, controls, keep in sequences:
            keep = np.ones(len(controls), bool) if keep is None else np.asarray(keep, bool)
            s.append(states[:-1][keep])
            c.append(np.asarray(controls)[keep])
            s_next.append(states[1:][keep])
        if not s:
            return cls(np.zeros((STATE_DIM, 0)), np.zeros((2, 0)), np.zeros((STATE_DIM, 0)), dt)
        return cls(np.concatenate(s).T, np.concatenate(c).T, np.concatenate(s_next).T, dt)

    def subset(self, idx):
        return SupervisedDataset(self.s[:, idx], self.c[:, idx], self.s_next[:, idx], self.dt)


@dataclass
class SupervisedConfig:
    max_steps: int = 20_000
    batch_size: int = 256
    lr: float = 1e-4
    holdout: float = 0.1
    eval_every: int = 100
    patience: int = 20
    seed: int = 0
    sigma0: tuple = (0.5, 0.5, 0.25)
    u_max: float = 1.0


def fit_supervised(data: SupervisedDataset, cfg: SupervisedConfig = SupervisedConfig()):
    """Maximize the mean transition log-density with minibatch ADAM.

    A random ``holdout`` fraction is kept aside for early stopping; the
    parameters with the best held-out log-density are returned.
    """
    K = len(data)
    if K == 0:
        raise ValueError("cannot fit an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(K)
    n_hold = int(round(cfg.holdout * K)) if K >= 10 else 0
    hold, fit = data.subset(perm[:n_hold]), data.subset(perm[n_hold:])
    score_set = hold if n_hold else fit

    params = init_params(cfg.seed, cfg.sigma0)
    adam = AdamState.fresh(cfg.lr)

    def score(p):
        return grad_log_density(p, score_set.s, score_set.c, score_set.s_next, data.dt, cfg.u_max)[0]

    best, best_score, stale = params.copy(), score(params), 0
    order, pos = rng.permutation(len(fit)), 0
    for step in range(1, cfg.max_steps + 1):
        if pos + cfg.batch_size > len(fit) and pos > 0:
            order, pos = rng.permutation(len(fit)), 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        _, grad = grad_log_density(params, fit.s[:, idx], fit.c[:, idx], fit.s_next[:, idx], data.dt, cfg.u_max)
        adam, params = adam_update(adam, params, grad)
        if step % cfg.eval_every == 0:
            sc = score(params)
            if sc > best_score:
                best, best_score, stale = params.copy(), sc, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    log.info("supervised fit: %d transitions, stopped at step %d, held-out score %.4f", K, step, best_score)
    return best


def fittruth_dataset(items):
    if any(it.truth is None for it in items):
        raise ValueError("FitTruth needs ground-truth trajectories")
    return SupervisedDataset.from_sequences(((it.truth.states, it.controls, None) for it in items), items[0].dt)


def fithand_estimate(hand_model, items, n_particles=2000, seed=0):
    """Filtered posterior means under the hand model, as supervised transitions."""
    seqs = []
    for i, it in enumerate(items):
        r = filter_forward(hand_model, it.obs, it.controls, sample_initial_states,
                           FilterConfig(n_particles, 1.0, seed + i))
        seqs.append((posterior_means(r), it.controls, None))
    return SupervisedDataset.from_sequences(seqs, items[0].dt)


# ---------------------------------------------------------------- pose MLE

class PoseEstimationError(ValueError):
    pass


def _bearing_jacobian(pose, lmap: LandmarkMap):
    dx = lmap.positions[:, 0] - pose[0]
    dy = lmap.positions[:, 1] - pose[1]
    r2 = dx * dx + dy * dy
    return np.stack([dy / r2, -dx / r2, -np.ones_like(dx)], axis=1)


def _residuals(obs, pose, lmap):
    return wrap_unchecked(obs - bearings(pose, lmap))


def grid_search_pose(obs, lmap: LandmarkMap, resolution=0.5, n_headings=16, half_width=None):
    """Best pose on a grid over the landmark workspace and ``n_headings`` headings."""
    if half_width is None:
        half_width = np.abs(lmap.positions).max() + 1.0
    g = np.arange(-half_width, half_width + 1e-9, resolution)
    hd = np.linspace(-np.pi, np.pi, n_headings, endpoint=False)
    X, Y, H = np.meshgrid(g, g, hd, indexing="ij")
    cand = np.stack([X.ravel(), Y.ravel(), H.ravel()])
    with np.errstate(divide="ignore", invalid="ignore"):
        dxy = lmap.positions.reshape(-1, 2, 1) - cand[None, :2]
        ok = np.all(np.hypot(dxy[:, 0], dxy[:, 1]) > 1e-9, axis=0)
        cand = cand[:, ok]
    cost = np.sum(_residuals(obs[:, None], cand, lmap) ** 2, axis=0)
    return cand[:, np.argmin(cost)]


def pose_mle(obs, lmap: LandmarkMap, sigma, init=None, max_iter=50, tol=1e-12):
    """Gauss-Newton estimate of the pose from one set of bearings.

    Returns ``(pose (3,), converged)``. Without ``init`` the start point
    comes from :func:`grid_search_pose`. ``sigma`` only scales the cost, so
    it does not move the optimum; it is accepted for interface symmetry.
    """
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (len(lmap),) or np.count_nonzero(np.isfinite(obs)) < 3:
        raise PoseEstimationError("pose estimation needs at least three bearings")
    del sigma
    pose = grid_search_pose(obs, lmap) if init is None else np.asarray(init, dtype=float).copy()
    res = _residuals(obs, pose, lmap)
    cost = res @ res
    for _ in range(max_iter):
        J = _bearing_jacobian(pose, lmap)
        try:
            delta = np.linalg.solve(J.T @ J + 1e-12 * np.eye(3), J.T @ res)
        except np.linalg.LinAlgError:
            return pose, False
        step = 1.0
        while step > 1e-6:
            cand = pose + step * delta
            cand[2] = wrap_angle(cand[2])
            r_c = _residuals(obs, cand, lmap)
            c_c = r_c @ r_c
            if c_c <= cost:
                break
            step *= 0.5
        else:
            return pose, np.linalg.norm(delta) < 1e-6
        pose, res, moved, cost = cand, r_c, step * np.linalg.norm(delta), c_c
        if moved < tol or cost < 1e-28:
            return pose, True
    return pose, False


def estimate_poses(obs_seq, lmap, sigma, reinit_cost=None):
    """Per-step pose MLE, warm-started from the previous estimate.

    Returns poses ``(T, 3)`` (NaN where no observation) and a flag array
    marking steps that are missing or did not converge. A grid search is
    redone whenever the warm-started fit leaves an implausibly large
    residual (default: 25 sigma^2 per landmark).
    """
    T = len(obs_seq)
    reinit_cost = reinit_cost if reinit_cost is not None else 25.0 * sigma ** 2 * len(lmap)
    poses = np.full((T, 3), np.nan)
    flagged = np.ones(T, bool)
    prev = None
    for t in range(T):
        if not obs_seq.present[t]:
            continue
        b = obs_seq.bearings[t]
        pose, ok = pose_mle(b, lmap, sigma, init=prev)
        r = _residuals(b, pose, lmap)
        if prev is not None and r @ r > reinit_cost:
            pose, ok = pose_mle(b, lmap, sigma, init=None)
        poses[t], flagged[t], prev = pose, not ok, pose
    return poses, flagged


# ---------------------------------------------------------------- TV velocities

@dataclass
class TvConfig:
    lam: float = 1.0
    huber_eps: float = 1e-3
    iters: int = 200
    lam_grid: tuple = (1e-4, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)

    def __post_init__(self):
        if self.lam < 0 or self.huber_eps <= 0 or self.iters < 0:
            raise ValueError("invalid TvConfig")
        self.lam_grid = tuple(self.lam_grid)


def huber(d, eps):
    a = np.abs(d)
    return np.where(a <= eps, 0.5 * d * d / eps, a - 0.5 * eps)


class TvProblem:
    """Huber-TV objective over increment velocities ``v (T-1, 3)``.

    ``p_hat[t] = p[0] + dt * sum(v[:t])``; the data term is the squared
    distance of ``p_hat`` to the poses on ``mask`` steps (heading residuals
    wrapped) and the penalty is ``lam * sum huber(v[t+1] - v[t])``.
    """

    def __init__(self, poses, dt, lam, eps, mask=None):
        self.p = np.asarray(poses, dtype=float)
        self.dt, self.lam, self.eps = dt, lam, eps
        T = len(self.p)
        self.mask = np.ones(T, bool) if mask is None else np.asarray(mask, bool).copy()
        self.mask[0] = False  # p_hat[0] is pinned to p[0]
        # p_hat[1:] - p[0] = A @ v
        self.A = dt * np.tril(np.ones((T - 1, T - 1)))[self.mask[1:]]
        self.target = self._unwrapped_targets()

    def _unwrapped_targets(self):
        p = self.p.copy()
        p[:, 2] = p[0, 2] + np.concatenate([[0.0], np.cumsum(wrap_unchecked(np.diff(p[:, 2])))])
        return (p[1:] - p[0])[self.mask[1:]]

    def residual(self, v):
        p_hat = self.p[0] + self.dt * np.concatenate([np.zeros((1, 3)), np.cumsum(v, axis=0)])
        r = p_hat - self.p
        r[:, 2] = wrap_unchecked(r[:, 2])
        r[~self.mask] = 0.0
        return r

    def value(self, v):
        r = self.residual(v)
        return float(np.sum(r * r) + self.lam * np.sum(huber(np.diff(v, axis=0), self.eps)))


def finite_difference_velocities(poses, dt):
    d = np.diff(poses, axis=0)
    d[:, 2] = wrap_unchecked(d[:, 2])
    return d / dt


def tv_solve(poses, dt, cfg: TvConfig, lam=None, mask=None, trace=None):
    """Minimize the Huber-TV objective by majorize-minimize (lagged diffusivity).

    Each iteration replaces every Huber term by its quadratic majorizer at
    the current iterate and solves the resulting linear system exactly, so
    the objective never increases. Starts from least squares on the data
    term, which is the finite-difference solution when every pose is used.
    """
    lam = cfg.lam if lam is None else lam
    prob = TvProblem(poses, dt, lam, cfg.huber_eps, mask)
    n = len(prob.p) - 1
    AtA = prob.A.T @ prob.A
    Atb = prob.A.T @ prob.target
    D = np.diff(np.eye(n), axis=0)
    v = np.linalg.lstsq(prob.A, prob.target, rcond=None)[0]
    f = prob.value(v)
    if trace is not None:
        trace.append(f)
    if lam == 0.0:
        return v
    for _ in range(cfg.iters):
        dv = D @ v
        w = 1.0 / np.maximum(np.abs(dv), cfg.huber_eps)  # per component
        new = np.empty_like(v)
        for k in range(3):
            H = 2.0 * AtA + lam * D.T @ (w[:, k:k + 1] * D)
            new[:, k] = np.linalg.solve(H, 2.0 * Atb[:, k])
        fn = prob.value(new)
        if fn > f:  # only round-off can do this; keep the better iterate
            break
        converged = f - fn <= 1e-12 * max(abs(f), 1.0)
        v, f = new, fn
        if trace is not None:
            trace.append(f)
        if converged:
            break
    return v


def tv_velocities(poses, dt, cfg: TvConfig = TvConfig(), lam=None):
    """State velocities ``(T, 3)`` = (vx, vy, omega) from noisy poses ``(T, 3)``.

    Under semi-implicit integration the velocity stored at step ``t+1`` is
    the increment velocity from ``t`` to ``t+1``; the step-0 velocity is
    not identified by poses and is taken from the initial-state
    distribution (at rest).
    """
    poses = np.asarray(poses, dtype=float)
    if len(poses) < 3:
        raise ValueError("TV differentiation needs at least three poses")
    v = tv_solve(poses, dt, cfg, lam=lam)
    return np.vstack([np.zeros((1, 3)), v])


def select_lambda(pose_seqs, dt, cfg: TvConfig, holdout_every=5):
    """Pick the grid value with the lowest held-out pose reconstruction error."""
    errors = []
    for lam in cfg.lam_grid:
        err = 0.0
        for poses in pose_seqs:
            mask = np.ones(len(poses), bool)
            mask[holdout_every - 1::holdout_every] = False
            v = tv_solve(poses, dt, cfg, lam=lam, mask=mask)
            r = TvProblem(poses, dt, lam, cfg.huber_eps).residual(v)
            err += float(np.sum(r[~mask] ** 2))
        errors.append(err)
    return cfg.lam_grid[int(np.argmin(errors))], errors


def _fill_flagged(poses, flagged):
    """Interpolate over flagged steps so the TV solve sees a complete sequence."""
    good = np.flatnonzero(~flagged)
    if len(good) < 2:
        raise PoseEstimationError("too few usable pose estimates")
    out = poses.copy()
    t = np.arange(len(poses))
    for k in range(2):
        out[:, k] = np.interp(t, good, poses[good, k])
    out[:, 2] = wrap_unchecked(np.interp(t, good, np.unwrap(poses[good, 2])))
    return out


def fittv_states(item, lmap, sigma, cfg: TvConfig, lam):
    poses, flagged = estimate_poses(item.obs, lmap, sigma)
    filled = _fill_flagged(poses, flagged)
    vel = tv_velocities(filled, item.dt, cfg, lam=lam)
    states = np.hstack([filled, vel])
    keep = ~(flagged[:-1] | flagged[1:])
    return states, keep


def fittv_estimate(items, lmap, sigma, dt, cfg: TvConfig = TvConfig(), valid_items=None):
    """Observation-only pose MLE, TV velocities, then supervised transitions.

    ``lam`` is chosen on ``valid_items`` (or the training items) from
    ``cfg.lam_grid``; transitions touching a flagged pose are dropped.
    """
    lam = cfg.lam
    if cfg.lam_grid:
        sel_items = valid_items or items
        pose_seqs = [_fill_flagged(*estimate_poses(it.obs, lmap, sigma)) for it in sel_items]
        lam, errors = select_lambda(pose_seqs, dt, cfg)
        log.info("FitTV lambda %.3g (held-out errors %s)", lam, np.round(errors, 4))
    seqs = []
    for it in items:
        states, keep = fittv_states(it, lmap, sigma, cfg, lam)
        seqs.append((states, it.controls, keep))
    return SupervisedDataset.from_sequences(seqs, dt), lam
