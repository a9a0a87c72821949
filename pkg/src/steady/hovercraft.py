"""Ground-truth hovercraft simulator, dataset generation and the Hand model.

State arrays are component-first: ``s[0:6] = (x, y, theta, vx, vy, omega)``
with any trailing batch shape; controls are ``(u_left, u_right)`` likewise.
Velocities are stored in the global frame while accelerations live in the
body frame.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .geometry import Pose, from_local, to_local, wrap_angle, wrap_unchecked

STATE_DIM = 6
CONTROL_DIM = 2


class State(NamedTuple):
    pose: Pose
    vx: float
    vy: float
    omega: float

    def to_array(self):
        return np.array([self.pose.x, self.pose.y, self.pose.theta, self.vx, self.vy, self.omega])

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=float)
        return cls(Pose.make(a[0], a[1], a[2]), float(a[3]), float(a[4]), float(a[5]))


class Control(NamedTuple):
    u_left: float
    u_right: float

    def to_array(self):
        return np.array([self.u_left, self.u_right])


@dataclass(frozen=True)
class HovParams:
    mass: float = 1.5
    inertia: float = 0.1
    arm: float = 0.2
    drag_lin: float = 0.3
    drag_rot: float = 0.02
    u_max: float = 1.0
    sigma_acc: float = 0.1
    sigma_alpha: float = 0.05
    dt: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"HovParams.{k} must be positive, got {v}")

    @property
    def noise_std(self):
        return np.array([self.sigma_acc, self.sigma_acc, self.sigma_alpha])


@dataclass
class Trajectory:
    """States ``(T, 6)`` and controls ``(T-1, 2)``, row per time step."""

    dt: float
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float).reshape(-1, CONTROL_DIM)
        if self.states.ndim != 2 or self.states.shape[1] != STATE_DIM:
            raise ValueError(f"states must be (T, 6), got {self.states.shape}")
        if len(self.states) < 2 or len(self.controls) != len(self.states) - 1:
            raise ValueError("need T >= 2 states and exactly T-1 controls")

    def __len__(self):
        return len(self.states)


def body_velocity(s):
    """Body-frame (v_lon, v_lat, omega) of component-first states."""
    v_lon, v_lat = to_local(s[2], np.asarray(s[3:5]))
    return np.stack([v_lon, v_lat, s[5]])


def true_accel(s, c, p: HovParams, drag=True):
    """Body-frame acceleration (a_lon, a_lat, alpha) with quadratic drag."""
    s = np.asarray(s, dtype=float)
    c = np.asarray(c, dtype=float)
    v_lon, v_lat, om = body_velocity(s)
    u_l, u_r = c[0], c[1]
    k_lin, k_rot = (p.drag_lin, p.drag_rot) if drag else (0.0, 0.0)
    a_lon = (u_l + u_r - k_lin * v_lon * np.abs(v_lon)) / p.mass
    a_lat = -k_lin * v_lat * np.abs(v_lat) / p.mass
    alpha = (p.arm * (u_r - u_l) - k_rot * om * np.abs(om)) / p.inertia
    return np.stack(np.broadcast_arrays(a_lon, a_lat, alpha))


def integrate(s, accel, dt):
    """Semi-implicit Euler: body velocity first, then the pose with the new velocity."""
    s = np.asarray(s, dtype=float)
    vb = body_velocity(s) + accel * dt
    vx, vy = from_local(s[2], vb[:2])
    om = vb[2]
    return np.stack([
        s[0] + vx * dt,
        s[1] + vy * dt,
        wrap_unchecked(s[2] + om * dt),
        vx,
        vy,
        om,
    ])


def realized_accel(s, s_next, dt):
    """Invert :func:`integrate` for the body-frame acceleration."""
    s = np.asarray(s, dtype=float)
    s_next = np.asarray(s_next, dtype=float)
    theta = s[2]
    v0 = to_local(theta, s[3:5])
    v1 = to_local(theta, s_next[3:5])
    return np.stack([(v1[0] - v0[0]) / dt, (v1[1] - v0[1]) / dt, (s_next[5] - s[5]) / dt])


def step_truth(s, c, p: HovParams, noise=None, rng=None):
    """One step of the true stochastic dynamics.

    ``noise`` is the acceleration disturbance in the body frame; it is drawn
    from the true process noise when omitted.
    """
    s = np.asarray(s, dtype=float)
    a = true_accel(s, c, p)
    if noise is None:
        rng = np.random.default_rng() if rng is None else rng
        noise = rng.standard_normal(a.shape) * p.noise_std.reshape((3,) + (1,) * (a.ndim - 1))
    return integrate(s, a + np.asarray(noise).reshape(a.shape), p.dt)


def hand_model_accel(s, c, p: HovParams):
    """Hand-written model: true dynamics without drag, doubled disturbance variance.

    Returns ``(mean, std)``, each shaped like the acceleration.
    """
    mean = true_accel(s, c, p, drag=False)
    std = np.sqrt(2.0) * p.noise_std.reshape((3,) + (1,) * (mean.ndim - 1))
    return mean, np.broadcast_to(std, mean.shape)



class AccelModel:
    """Dynamics interface: a body-frame Gaussian acceleration model plus ``dt``.

    Subclasses implement ``accel(states, controls) -> (mean, std)``.
    """

    dt: float

    def accel(self, s, c):
        raise NotImplementedError

    def sample_next(self, s, c, rng):
        return propagate(self, s, c, rng=rng)[0]


def propagate(model, s, c, rng=None, eps=None):
    """Sample one transition for a batch of states under ``model``.

    Returns the next states and the realized body-frame acceleration.
    """
    mean, std = model.accel(s, c)
    if eps is None:
        rng = np.random.default_rng() if rng is None else rng
        eps = rng.standard_normal(mean.shape)
    a = mean + std * np.asarray(eps).reshape(mean.shape)
    return integrate(s, a, model.dt), a


@dataclass
class TrueModel(AccelModel):
    """The generating dynamics exposed through the model interface."""

    p: HovParams = field(default_factory=HovParams)

    @property
    def dt(self):
        return self.p.dt

    def accel(self, s, c):
        mean = true_accel(s, c, self.p)
        std = self.p.noise_std.reshape((3,) + (1,) * (mean.ndim - 1))
        return mean, np.broadcast_to(std, mean.shape)


@dataclass
class HandModel(AccelModel):
    p: HovParams = field(default_factory=HovParams)

    @property
    def dt(self):
        return self.p.dt

    def accel(self, s, c):
        return hand_model_accel(s, c, self.p)


@dataclass(frozen=True)
class Excitation:
    """Ornstein-Uhlenbeck thrust policy, clipped to the actuator range."""

    reversion: float = 0.5
    volatility: float = 0.6


def excitation_controls(n_steps, p: HovParams, rng, policy: Excitation = Excitation()):
    mean = 0.5 * p.u_max
    u = np.empty((n_steps, CONTROL_DIM))
    cur = mean + policy.volatility / np.sqrt(2 * policy.reversion) * rng.standard_normal(CONTROL_DIM)
    for k in range(n_steps):
        cur = np.clip(cur, 0.0, p.u_max)
        u[k] = cur
        cur = (cur + policy.reversion * (mean - cur) * p.dt
               + policy.volatility * np.sqrt(p.dt) * rng.standard_normal(CONTROL_DIM))
    return u


def sample_initial_states(n, rng):
    """Initial-state distribution shared by the simulator and the filters."""
    s = np.zeros((STATE_DIM, n))
    s[0:2] = rng.uniform(-1.0, 1.0, size=(2, n))
    s[2] = wrap_angle(rng.uniform(-np.pi, np.pi, size=n))
    return s


def simulate(x0, controls, p: HovParams, rng):
    states = np.empty((len(controls) + 1, STATE_DIM))
    states[0] = x0
    for k, c in enumerate(controls):
        states[k + 1] = step_truth(states[k], c, p, rng=rng)
    return Trajectory(p.dt, states, controls)


def n_steps_for(duration, dt):
    n = duration / dt
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise ValueError(f"duration {duration} is not a positive multiple of dt {dt}")
    return int(round(n))


def generate_dataset(seed, n_train=4, n_valid=4, n_test=8, duration=10.0,
                     p: HovParams = HovParams(), excitation: Excitation = Excitation()):
    """Simulate train/valid/test splits; each trajectory gets its own RNG stream."""
    counts = (n_train, n_valid, n_test)
    if any(int(n) != n or n < 0 for n in counts) or n_train < 1:
        raise ValueError(f"invalid split counts {counts}")
    n_steps = n_steps_for(duration, p.dt)
    streams = np.random.SeedSequence(seed).spawn(sum(counts))
    trajs = []
    for ss in streams:
        rng = np.random.default_rng(ss)
        x0 = sample_initial_states(1, rng)[:, 0]
        controls = excitation_controls(n_steps, p, rng, excitation)
        trajs.append(simulate(x0, controls, p, rng))
    return trajs[:n_train], trajs[n_train:n_train + n_valid], trajs[n_train + n_valid:]
