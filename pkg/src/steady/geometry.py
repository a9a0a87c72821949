"""Planar pose arithmetic and angle handling.

All functions broadcast over numpy arrays so the same code serves single
poses and whole particle clouds.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * np.pi


class Pose(NamedTuple):
    x: float
    y: float
    theta: float

    @classmethod
    def make(cls, x, y, theta):
        return cls(float(x), float(y), float(wrap_angle(theta)))


class Vec2(NamedTuple):
    a: float
    b: float


def wrap_angle(a):
    """Map angles into the half-open interval (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("wrap_angle: non-finite angle")
    w = wrap_unchecked(a)
    return w if w.ndim else float(w)


def wrap_unchecked(a):
    """:func:`wrap_angle` without validation, for per-particle hot loops."""
    # ceil is several times cheaper than np.mod on large batches
    w = a - TWO_PI * np.ceil((a - np.pi) / TWO_PI)
    return w + TWO_PI * (w <= -np.pi)


def to_local(theta, v):
    """Rotate a global-frame vector into the body frame, i.e. by -theta.

    ``v`` is a pair (or a ``(2, ...)`` array) of components.
    """
    c, s = np.cos(theta), np.sin(theta)
    a, b = v[0], v[1]
    return _pair(c * a + s * b, -s * a + c * b, v)


def from_local(theta, v):
    """Rotate a body-frame vector back into the global frame."""
    c, s = np.cos(theta), np.sin(theta)
    a, b = v[0], v[1]
    return _pair(c * a - s * b, s * a + c * b, v)


def _pair(a, b, like):
    if isinstance(like, np.ndarray):
        return np.stack([a, b])
    if np.ndim(a) == 0 and np.ndim(b) == 0:
        if not (np.isfinite(a) and np.isfinite(b)):
            raise ValueError("non-finite vector component")
        return Vec2(float(a), float(b))
    return np.stack([a, b])


def circular_mean(angles, weights=None, axis=-1):
    """Weighted mean direction via atan2 of the weighted sin/cos sums."""
    angles = np.asarray(angles, dtype=float)
    if weights is None:
        weights = np.ones_like(angles)
    s = np.sum(weights * np.sin(angles), axis=axis)
    c = np.sum(weights * np.cos(angles), axis=axis)
    return wrap_angle(np.arctan2(s, c))
