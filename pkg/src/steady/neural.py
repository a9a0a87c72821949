"""Stochastic neural kinodynamic model.

A one-hidden-layer ReLU network with a linear skip path predicts the mean
body-frame acceleration; a linear layer followed by softplus predicts its
per-component standard deviation. Inputs are the body-frame velocities and
the two thrusts, scaled to roughly unit range. Gradients of the transition
log-density are derived by hand for this fixed architecture.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, fields

import numpy as np

from . import _kernels
from .geometry import wrap_unchecked
from .hovercraft import AccelModel, body_velocity, propagate, realized_accel

N_IN = 5
N_HIDDEN = 64
N_OUT = 3
PARAMS_FORMAT_VERSION = 1
_LOG_2PI = np.log(2.0 * np.pi)

VEL_SCALE = 3.0
OMEGA_SCALE = 3.0


@dataclass
class DynamicsParams:
    W1: np.ndarray
    b1: np.ndarray
    W_mu: np.ndarray
    b_mu: np.ndarray
    W_skip: np.ndarray
    W_sig: np.ndarray
    b_sig: np.ndarray

    SHAPES = {
        "W1": (N_HIDDEN, N_IN), "b1": (N_HIDDEN,),
        "W_mu": (N_OUT, N_HIDDEN), "b_mu": (N_OUT,),
        "W_skip": (N_OUT, N_IN),
        "W_sig": (N_OUT, N_IN), "b_sig": (N_OUT,),
    }

    def __post_init__(self):
        for name, shape in self.SHAPES.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            setattr(self, name, arr)

    @classmethod
    def names(cls):
        return [f.name for f in fields(cls)]

    def tensors(self):
        return {n: getattr(self, n) for n in self.names()}

    def map(self, fn, *others):
        """Apply ``fn`` tensor-wise across this and other same-shaped params."""
        return DynamicsParams(**{
            n: fn(getattr(self, n), *(getattr(o, n) for o in others)) for n in self.names()
        })

    @classmethod
    def zeros(cls):
        return cls(**{n: np.zeros(s) for n, s in cls.SHAPES.items()})

    def copy(self):
        return self.map(np.copy)

    def flat(self):
        return np.concatenate([t.ravel() for t in self.tensors().values()])

    @classmethod
    def from_flat(cls, v):
        out, i = {}, 0
        for n in cls.names():
            shape = cls.SHAPES[n]
            k = int(np.prod(shape))
            out[n] = np.asarray(v[i:i + k], dtype=float).reshape(shape)
            i += k
        return cls(**out)

    def all_finite(self):
        return all(np.all(np.isfinite(t)) for t in self.tensors().values())

    def equals(self, other):
        return all(np.array_equal(a, b) for a, b in zip(self.tensors().values(), other.tensors().values()))


def save_params(params: DynamicsParams, path, **meta):
    """Write all tensors to a ``.npz`` archive; float64 round-trips bit-exactly."""
    extra = {f"meta_{k}": np.asarray(v) for k, v in meta.items()}
    np.savez(path, format_version=PARAMS_FORMAT_VERSION, **params.tensors(), **extra)


def load_params(path):
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != PARAMS_FORMAT_VERSION:
            raise ValueError(f"unsupported params format version {version}")
        return DynamicsParams(**{n: z[n] for n in DynamicsParams.names()})


def params_to_bytes(params):
    buf = io.BytesIO()
    save_params(params, buf)
    return buf.getvalue()


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def init_params(seed, sigma0=(0.5, 0.5, 0.25)):
    """Zero mean acceleration (identity-like dynamics) and a wide noise model."""
    sigma0 = np.asarray(sigma0, dtype=float)
    if sigma0.shape != (N_OUT,) or np.any(sigma0 <= 0):
        raise ValueError("sigma0 must be three positive numbers")
    rng = np.random.default_rng(seed)
    p = DynamicsParams.zeros()
    p.W1 = rng.standard_normal((N_HIDDEN, N_IN)) * np.sqrt(2.0 / N_IN)
    p.b_sig = softplus_inv(sigma0)
    return p


def make_input(s, c, u_max=1.0):
    """Normalized network input ``(5, *batch)`` from component-first state/control."""
    vb = body_velocity(s)
    c = np.asarray(c, dtype=float)
    batch = np.broadcast_shapes(vb.shape[1:], c.shape[1:])
    return np.stack([
        np.broadcast_to(vb[0] / VEL_SCALE, batch),
        np.broadcast_to(vb[1] / VEL_SCALE, batch),
        np.broadcast_to(vb[2] / OMEGA_SCALE, batch),
        np.broadcast_to(c[0] / u_max, batch),
        np.broadcast_to(c[1] / u_max, batch),
    ])


def _as_matrix(z):
    z = np.asarray(z, dtype=float)
    return z.reshape(N_IN, -1), z.shape[1:]


def predict(params: DynamicsParams, z):
    """Mean and std of the body-frame acceleration for normalized inputs ``z``."""
    zm, batch = _as_matrix(z)
    mean = _kernels.mean_head(np.ascontiguousarray(zm), params.W1, params.b1, params.W_mu,
                              params.b_mu, params.W_skip)
    std = softplus(params.W_sig @ zm + params.b_sig[:, None])
    return mean.reshape((N_OUT,) + batch), std.reshape((N_OUT,) + batch)


@dataclass
class NeuralDynamics(AccelModel):
    """Learned model behind the common dynamics interface."""

    params: DynamicsParams
    dt: float
    u_max: float = 1.0

    def accel(self, s, c):
        return predict(self.params, make_input(s, c, self.u_max))

    def sample_next(self, s, c, rng):
        """Same draw as :func:`propagate`, fused for a ``(6, N)`` particle batch."""
        s = np.asarray(s, dtype=float)
        c = np.asarray(c, dtype=float)
        if s.ndim != 2 or c.ndim != 1:
            return super().sample_next(s, c, rng)
        n = s.shape[1]
        cos, sin = np.cos(s[2]), np.sin(s[2])
        vb = np.empty((3, n))
        vb[0] = cos * s[3] + sin * s[4]
        vb[1] = cos * s[4] - sin * s[3]
        vb[2] = s[5]
        z = np.empty((N_IN, n))
        z[0] = vb[0] / VEL_SCALE
        z[1] = vb[1] / VEL_SCALE
        z[2] = vb[2] / OMEGA_SCALE
        z[3] = c[0] / self.u_max
        z[4] = c[1] / self.u_max
        mean, std = predict(self.params, z)
        eps = rng.standard_normal((N_OUT, n))
        vb += (mean + std * eps) * self.dt
        out = np.empty_like(s)
        out[3] = cos * vb[0] - sin * vb[1]
        out[4] = sin * vb[0] + cos * vb[1]
        out[5] = vb[2]
        out[0] = s[0] + out[3] * self.dt
        out[1] = s[1] + out[4] * self.dt
        out[2] = wrap_unchecked(s[2] + vb[2] * self.dt)
        return out


def step_model(params, s, c, dt, eps=None, rng=None, u_max=1.0):
    return propagate(NeuralDynamics(params, dt, u_max), s, c, rng=rng, eps=eps)


def gaussian_logpdf(x, mean, std):
    return -0.5 * ((x - mean) / std) ** 2 - np.log(std) - 0.5 * _LOG_2PI


def transition_log_density(params, s, c, s_next, dt, u_max=1.0):
    """Log-density of the realized body-frame acceleration; pose is not checked."""
    a = realized_accel(s, s_next, dt)
    mean, std = predict(params, make_input(s, c, u_max))
    return gaussian_logpdf(a, mean, std).sum(axis=0)


def model_log_density(model, s, c, s_next):
    """Same as :func:`transition_log_density` for any dynamics-interface model."""
    a = realized_accel(s, s_next, model.dt)
    mean, std = model.accel(s, c)
    return gaussian_logpdf(a, mean, std).sum(axis=0)


def grad_log_density(params: DynamicsParams, s, c, s_next, dt, u_max=1.0):
    """Batch-mean transition log-density and its exact gradient.

    ``s``, ``c`` and ``s_next`` are component-first with one batch axis.
    """
    a = realized_accel(s, s_next, dt).reshape(N_OUT, -1)
    z, _ = _as_matrix(make_input(s, c, u_max))
    return grad_from_accel(params, z, a)


def grad_from_accel(params: DynamicsParams, z, a):
    """Value and gradient of ``mean_b log N(a_b; mean(z_b), std(z_b)^2)``."""
    B = z.shape[1]
    if B == 0:
        raise ValueError("empty batch")
    pre_h = params.W1 @ z + params.b1[:, None]
    h = np.maximum(pre_h, 0.0)
    mean = params.W_mu @ h + params.W_skip @ z + params.b_mu[:, None]
    pre_s = params.W_sig @ z + params.b_sig[:, None]
    std = softplus(pre_s)

    r = (a - mean) / std
    value = float(np.sum(-0.5 * r * r - np.log(std)) / B - 0.5 * N_OUT * _LOG_2PI)

    g_mean = r / std / B
    g_pre_s = (r * r - 1.0) / std * sigmoid(pre_s) / B
    g_h = (params.W_mu.T @ g_mean) * (pre_h > 0)

    grad = DynamicsParams(
        W1=g_h @ z.T,
        b1=g_h.sum(axis=1),
        W_mu=g_mean @ h.T,
        b_mu=g_mean.sum(axis=1),
        W_skip=g_mean @ z.T,
        W_sig=g_pre_s @ z.T,
        b_sig=g_pre_s.sum(axis=1),
    )
    return value, grad
