"""Bearing-only landmark observations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import wrap_angle, wrap_unchecked

DEFAULT_SIGMA = np.deg2rad(5.0)
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class LandmarkMap:
    positions: np.ndarray  # (L, 2)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if len(pos) < 1:
            raise ValueError("a landmark map needs at least one landmark")
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return len(self.positions)

    @classmethod
    def random(cls, rng, n=4, side=20.0):
        return cls(rng.uniform(-side / 2, side / 2, size=(n, 2)))


def bearing(pose, landmark):
    """Bearing of ``landmark`` relative to the robot heading.

    ``pose`` is ``(x, y, theta)`` (scalars or equally-shaped arrays).
    """
    x, y, th = np.asarray(pose[0], float), np.asarray(pose[1], float), np.asarray(pose[2], float)
    dx, dy = landmark[0] - x, landmark[1] - y
    if np.any((dx == 0) & (dy == 0)):
        raise ValueError("bearing undefined: robot is exactly at the landmark")
    return wrap_angle(np.arctan2(dy, dx) - th)


def bearings(pose, lmap: LandmarkMap):
    """All bearings, shaped ``(L, *batch)``."""
    x, y, th = (np.asarray(pose[k], dtype=float) for k in range(3))
    lm = lmap.positions.reshape((-1, 2) + (1,) * x.ndim)
    dx, dy = lm[:, 0] - x, lm[:, 1] - y
    if np.any((dx == 0) & (dy == 0)):
        raise ValueError("bearing undefined: robot is exactly at a landmark")
    return wrap_unchecked(np.arctan2(dy, dx) - th)


def sample_observation(pose, lmap: LandmarkMap, sigma, rng):
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    b = bearings(pose, lmap)
    return wrap_angle(b + sigma * rng.standard_normal(b.shape))


def log_likelihood(obs, pose, lmap: LandmarkMap, sigma):
    """Sum over landmarks of wrapped-residual Gaussian log-densities.

    ``obs`` has shape ``(L,)``; ``pose`` may carry a batch of particles, in
    which case one log-density per particle is returned.
    """
    obs = np.asarray(obs, dtype=float)
    pred = bearings(pose, lmap)
    resid = wrap_unchecked(obs.reshape((-1,) + (1,) * (pred.ndim - 1)) - pred)
    return -0.5 * np.sum(resid * resid, axis=0) / sigma ** 2 - len(obs) * (0.5 * _LOG_2PI + np.log(sigma))


@dataclass
class ObservationSequence:
    """Bearings ``(T, L)`` with a presence mask; absent rows hold NaN."""

    bearings: np.ndarray
    present: np.ndarray
    sigma: float
    lmap: LandmarkMap

    def __post_init__(self):
        self.bearings = np.asarray(self.bearings, dtype=float)
        self.present = np.asarray(self.present, dtype=bool)
        if not self.present.any():
            raise ValueError("an observation sequence needs at least one present step")

    def __len__(self):
        return len(self.present)

    def log_likelihood(self, t, states):
        return log_likelihood(self.bearings[t], states[:3], self.lmap, self.sigma)

    def with_sigma(self, sigma):
        """Same measurements, different assumed noise level."""
        return ObservationSequence(self.bearings, self.present, sigma, self.lmap)

    def steps(self):
        return [self.bearings[t] if self.present[t] else None for t in range(len(self))]


def observe_trajectory(traj, lmap: LandmarkMap, sigma, stride, rng):
    """Observe the first step and every ``stride``-th step after it."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    T = len(traj)
    present = np.zeros(T, dtype=bool)
    present[::stride] = True
    b = np.full((T, len(lmap)), np.nan)
    # draw noise for every step so observations at different strides share values
    noisy = sample_observation(traj.states.T[:3], lmap, sigma, rng).T
    b[present] = noisy[present]
    return ObservationSequence(b, present, sigma, lmap)
