"""Bootstrap particle filter with ancestry tracking.

Particles are stored component-first, ``states[t]`` has shape ``(D, N)``,
so every model and observation call is a single batched array operation.
Resampling happens while propagating out of a step that received an
observation, so ``log_weights[t]`` are the filtering weights at step ``t``
and ``ancestors[t]`` index the step ``t - 1`` particles that were
propagated into step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import circular_mean

ANGLE_COMPONENT = 2


class ParticleDeath(RuntimeError):
    """Every particle received zero likelihood."""

    def __init__(self, step, context=""):
        self.step = step
        msg = f"all particle weights vanished at time step {step}"
        super().__init__(f"{msg} ({context})" if context else msg)


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 2000
    w_obs: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if not 0.0 <= self.w_obs <= 1.0:
            raise ValueError("w_obs must lie in [0, 1]")


@dataclass
class ParticleCloud:
    states: np.ndarray       # (T, D, N)
    log_weights: np.ndarray  # (T, N), normalized per step
    ancestors: np.ndarray    # (T, N); row 0 is the identity

    @property
    def n_particles(self):
        return self.states.shape[2]

    def __len__(self):
        return self.states.shape[0]

    def weights(self, t):
        return np.exp(self.log_weights[t])


@dataclass
class FilterResult:
    cloud: ParticleCloud
    log_marginal: float
    ess: np.ndarray  # effective sample size at each step, before resampling


def logsumexp(a):
    """log(sum(exp(a))) of a 1-D array; -inf when every entry is -inf."""
    a = np.asarray(a, dtype=float)
    m = np.max(a)
    if not np.isfinite(m):
        return m if m > 0 or np.isnan(m) else -np.inf
    return float(m + np.log(np.sum(np.exp(a - m))))


def normalize_log_weights(lw):
    return lw - logsumexp(lw)


def effective_sample_size(log_weights):
    w = np.exp(normalize_log_weights(log_weights))
    return 1.0 / np.sum(w * w)


def systematic_resample(log_weights, rng):
    """Low-variance resampling; returns ancestor indices in ascending order."""
    lw = np.asarray(log_weights, dtype=float)
    total = logsumexp(lw)
    if not np.isfinite(total):
        raise ParticleDeath(-1, "cannot resample: weights are not normalizable")
    n = len(lw)
    cdf = np.cumsum(np.exp(lw - total))
    cdf[-1] = 1.0
    positions = (rng.uniform() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, positions, side="right"), n - 1)


def step_rng(seed, t):
    """Independent generator per (seed, step) so results do not depend on call order."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(t)])


def filter_forward(model, obs, controls, init_sampler, cfg: FilterConfig):
    """Run the filter over ``len(obs)`` steps.

    ``model.sample_next(states, control, rng)`` propagates a batch;
    ``obs.present[t]`` flags observed steps and ``obs.log_likelihood(t, states)``
    scores a batch. Observation log-likelihoods are multiplied by
    ``cfg.w_obs`` (posterior flattening).
    """
    T = len(obs)
    controls = np.asarray(controls, dtype=float)
    if len(controls) != T - 1:
        raise ValueError(f"{T} observation steps need {T - 1} controls, got {len(controls)}")
    N = cfg.n_particles
    uniform = np.full(N, -np.log(N))
    identity = np.arange(N)

    x = np.asarray(init_sampler(N, step_rng(cfg.rng_seed, 0)), dtype=float)
    states = np.empty((T,) + x.shape)
    log_w = np.empty((T, N))
    ancestors = np.empty((T, N), dtype=np.intp)
    ess = np.empty(T)
    log_marginal = 0.0

    for t in range(T):
        rng = step_rng(cfg.rng_seed, t + 1)
        if t == 0:
            lw, anc = uniform, identity
        elif weighted:
            anc = systematic_resample(log_w[t - 1], rng)
            x = model.sample_next(states[t - 1][:, anc], controls[t - 1], rng)
            lw = uniform
        else:
            anc = identity
            x = model.sample_next(states[t - 1], controls[t - 1], rng)
            lw = log_w[t - 1]

        weighted = bool(obs.present[t]) and cfg.w_obs > 0
        if weighted:
            inc = lw + cfg.w_obs * obs.log_likelihood(t, x)
            step_norm = logsumexp(inc)
            if not np.isfinite(step_norm):
                raise ParticleDeath(t)
            log_marginal += step_norm
            lw = inc - step_norm
        states[t], log_w[t], ancestors[t] = x, lw, anc
        ess[t] = 1.0 / np.sum(np.exp(2 * lw))

    return FilterResult(ParticleCloud(states, log_w, ancestors), float(log_marginal), ess)


def trace_lineages(cloud: ParticleCloud, final_idx):
    """Follow ancestor links back from final-step indices; returns ``(M, T, D)``."""
    idx = np.asarray(final_idx, dtype=np.intp)
    T = len(cloud)
    out = np.empty((len(idx), T, cloud.states.shape[1]))
    for t in range(T - 1, -1, -1):
        out[:, t, :] = cloud.states[t][:, idx].T
        idx = cloud.ancestors[t][idx]
    return out


def sample_trajectories(result: FilterResult, M, rng):
    """Draw ``M`` posterior trajectories by ancestral tracing (duplicates allowed)."""
    if M < 1:
        raise ValueError("M must be >= 1")
    cloud = result.cloud
    final_idx = rng.choice(cloud.n_particles, size=M, p=cloud.weights(len(cloud) - 1))
    return trace_lineages(cloud, final_idx)


def posterior_means(result: FilterResult, angle_components=(ANGLE_COMPONENT,)):
    """Weighted per-step means ``(T, D)``; angle components use the circular mean."""
    cloud = result.cloud
    w = np.exp(cloud.log_weights)  # (T, N)
    means = np.einsum("tdn,tn->td", cloud.states, w)
    for k in angle_components:
        if k < cloud.states.shape[1]:
            means[:, k] = circular_mean(cloud.states[:, k, :], w, axis=-1)
    return means


def weighted_quantiles(values, log_weights, qs):
    """Quantiles of a weighted 1-D particle sample."""
    order = np.argsort(values)
    v = values[order]
    w = np.exp(normalize_log_weights(log_weights[order]))
    cdf = np.cumsum(w) - 0.5 * w
    return np.interp(qs, cdf, v)
