"""Monte Carlo EM training loop.

Each EM step filters one training trajectory under the current model with
a flattened observation likelihood, traces ``M`` posterior trajectories,
and takes a single ADAM ascent step on their mean transition log-density.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .hovercraft import sample_initial_states
from .neural import DynamicsParams, NeuralDynamics, grad_log_density, init_params
from .particle_filter import (
    FilterConfig,
    ParticleDeath,
    filter_forward,
    sample_trajectories,
    step_rng,
)

log = logging.getLogger(__name__)

VALIDATION_SEED = 987_654
TRACE_STREAM = 1 << 30


@dataclass
class AdamState:
    m: DynamicsParams
    v: DynamicsParams
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def fresh(cls, lr=1e-4):
        return cls(DynamicsParams.zeros(), DynamicsParams.zeros(), lr=lr)


def adam_update(adam: AdamState, params: DynamicsParams, grad: DynamicsParams):
    """One bias-corrected ADAM step in the ascent direction of ``grad``."""
    if not grad.all_finite():
        raise FloatingPointError("non-finite gradient passed to adam_update")
    t = adam.t + 1
    b1, b2 = adam.beta1, adam.beta2
    m = adam.m.map(lambda m, g: b1 * m + (1 - b1) * g, grad)
    v = adam.v.map(lambda v, g: b2 * v + (1 - b2) * g * g, grad)
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new_params = params.map(
        lambda p, m_, v_: p + adam.lr * (m_ / c1) / (np.sqrt(v_ / c2) + adam.eps_hat), m, v)
    return replace(adam, m=m, v=v, t=t), new_params


@dataclass
class TrainConfig:
    max_steps: int = 5000
    n_particles: int = 2000
    n_traj_samples: int = 10
    anneal_steps: int | None = None  # None -> half of max_steps; 0 disables flattening
    validation_every: int = 200
    patience: int = 10
    seed: int = 0
    lr: float = 1e-4
    sigma0: tuple = (0.5, 0.5, 0.25)
    u_max: float = 1.0

    def __post_init__(self):
        if self.anneal_steps is None:
            self.anneal_steps = self.max_steps // 2
        self.sigma0 = tuple(float(s) for s in self.sigma0)
        for name in ("n_particles", "n_traj_samples", "validation_every", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.max_steps < 0 or self.anneal_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.anneal_steps > max(self.max_steps, 1):
            raise ValueError("anneal_steps cannot exceed max_steps")


def w_obs_at(step, anneal_steps):
    """Linear flattening schedule from 0 to 1."""
    if anneal_steps <= 0:
        return 1.0
    return min(1.0, step / anneal_steps)


@dataclass
class TrainRun:
    params: DynamicsParams
    adam: AdamState
    step: int = 0
    w_obs: float = 0.0
    history: list = field(default_factory=list)
    best_params: DynamicsParams | None = None

    def validations(self):
        return [(h["step"], h["valid_score"]) for h in self.history if h["kind"] == "valid"]


class TrainingError(RuntimeError):
    def __init__(self, msg, run=None):
        super().__init__(msg)
        self.run = run


def new_run(cfg: TrainConfig):
    return TrainRun(init_params(cfg.seed, cfg.sigma0), AdamState.fresh(cfg.lr),
                    w_obs=w_obs_at(0, cfg.anneal_steps))


def model_for(params, item, cfg):
    return NeuralDynamics(params, item.dt, cfg.u_max)


def m_step_objective(params, trajs, controls, dt, u_max):
    """Mean transition log-density over sampled trajectories ``(M, T, 6)``.

    Normalized by ``M * (T - 1)``; returns ``(value, grad)``.
    """
    M, T, D = trajs.shape
    s = trajs[:, :-1, :].reshape(-1, D).T
    s_next = trajs[:, 1:, :].reshape(-1, D).T
    c = np.tile(np.asarray(controls), (M, 1)).T
    return grad_log_density(params, s, c, s_next, dt, u_max)


def em_step(run: TrainRun, train_set, cfg: TrainConfig):
    """One E step on a round-robin training trajectory, then one ADAM step."""
    k = run.step % len(train_set)
    item = train_set[k]
    w_obs = w_obs_at(run.step, cfg.anneal_steps)
    seed = (cfg.seed * 1_000_003 + run.step) & 0x7FFFFFFF
    t0 = time.perf_counter()
    try:
        result = filter_forward(model_for(run.params, item, cfg), item.obs, item.controls,
                                sample_initial_states, FilterConfig(cfg.n_particles, w_obs, seed))
    except ParticleDeath as err:
        raise TrainingError(f"E step {run.step} on training trajectory {k}: {err}", run) from err
    trajs = sample_trajectories(result, cfg.n_traj_samples, step_rng(seed, TRACE_STREAM))
    value, grad = m_step_objective(run.params, trajs, item.controls, item.dt, cfg.u_max)
    adam, params = adam_update(run.adam, run.params, grad)
    run.history.append({
        "kind": "train", "step": run.step, "traj": k, "objective": value, "w_obs": w_obs,
        "log_marginal": result.log_marginal, "wall": time.perf_counter() - t0,
    })
    run.params, run.adam = params, adam
    run.step += 1
    run.w_obs = w_obs_at(run.step, cfg.anneal_steps)
    return run


def validate(params, valid_set, cfg: TrainConfig, n_particles=None, seed=VALIDATION_SEED,
             return_flags=False):
    """Mean length-normalized log marginal likelihood at ``w_obs = 1``.

    Trajectories on which every particle dies are skipped and flagged.
    """
    if not valid_set:
        raise ValueError("validation set is empty")
    n = n_particles or cfg.n_particles
    scores, flagged = [], []
    for i, item in enumerate(valid_set):
        try:
            r = filter_forward(model_for(params, item, cfg), item.obs, item.controls,
                               sample_initial_states, FilterConfig(n, 1.0, seed + i))
        except ParticleDeath as err:
            log.warning("validation trajectory %d skipped: %s", i, err)
            flagged.append(i)
            continue
        scores.append(r.log_marginal / len(item))
    score = float(np.mean(scores)) if scores else -np.inf
    return (score, flagged) if return_flags else score


def train(train_set, valid_set, cfg: TrainConfig, run: TrainRun | None = None, on_check=None):
    """Run EM until ``max_steps`` or until validation stops improving.

    Returns the best-scoring parameters and the run (with full history).
    ``on_check(run, best_params)`` is invoked after every validation check,
    which is where callers hook checkpointing.
    """
    if not train_set or not valid_set:
        raise ValueError("training and validation sets must be non-empty")
    run = run or new_run(cfg)
    if cfg.max_steps == 0:
        return run.params.copy(), run

    best_params, best_score, stale = None, -np.inf, 0
    for h in run.history:  # resuming: recover early-stopping state
        if h["kind"] == "valid":
            if h["valid_score"] > best_score:
                best_score, stale = h["valid_score"], 0
            else:
                stale += 1
    best_params = run.best_params

    def check():
        nonlocal best_params, best_score, stale
        t0 = time.perf_counter()
        score = validate(run.params, valid_set, cfg)
        run.history.append({"kind": "valid", "step": run.step, "valid_score": score,
                            "w_obs": run.w_obs, "wall": time.perf_counter() - t0})
        if score > best_score:
            best_params, best_score, stale = run.params.copy(), score, 0
        else:
            stale += 1
        run.best_params = best_params
        log.info("step %d  w_obs %.3f  valid %.4f  best %.4f", run.step, run.w_obs, score, best_score)
        if on_check is not None:
            on_check(run, best_params)

    if not any(h["kind"] == "valid" and h["step"] == run.step for h in run.history):
        check()
    while run.step < cfg.max_steps and stale < cfg.patience:
        em_step(run, train_set, cfg)
        if run.step % cfg.validation_every == 0 or run.step == cfg.max_steps:
            check()
    return best_params, run


def config_dict(cfg: TrainConfig):
    return json.loads(json.dumps(asdict(cfg)))
