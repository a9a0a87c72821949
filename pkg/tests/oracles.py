"""Independent reference computations used by the test-suite.

Nothing here imports the code under test.
"""

import math

import numpy as np


def mlp_forward_loops(W1, b1, W_mu, b_mu, W_skip, W_sig, b_sig, z):
    """Straight-line scalar reimplementation of the dynamics network for one input."""
    h = []
    for i in range(len(b1)):
        acc = b1[i]
        for j in range(len(z)):
            acc += W1[i][j] * z[j]
        h.append(acc if acc > 0 else 0.0)
    mean, std = [], []
    for k in range(len(b_mu)):
        m = b_mu[k]
        for i in range(len(h)):
            m += W_mu[k][i] * h[i]
        for j in range(len(z)):
            m += W_skip[k][j] * z[j]
        mean.append(m)
        pre = b_sig[k]
        for j in range(len(z)):
            pre += W_sig[k][j] * z[j]
        std.append(math.log1p(math.exp(pre)) if pre < 30 else pre + math.log1p(math.exp(-pre)))
    return mean, std


def scalar_gauss_logpdf(x, m, s):
    return -0.5 * ((x - m) / s) ** 2 - math.log(s) - 0.5 * math.log(2 * math.pi)


class LinearGaussian1D:
    """x' = a x + b u + N(0, q);  y = x + N(0, r);  x_0 ~ N(m0, p0)."""

    def __init__(self, a=0.9, b=0.5, q=0.3, r=0.5, m0=0.0, p0=1.0):
        self.a, self.b, self.q, self.r, self.m0, self.p0 = a, b, q, r, m0, p0

    def simulate(self, T, rng):
        u = rng.normal(size=T - 1)
        x = np.empty(T)
        x[0] = self.m0 + math.sqrt(self.p0) * rng.normal()
        for t in range(T - 1):
            x[t + 1] = self.a * x[t] + self.b * u[t] + math.sqrt(self.q) * rng.normal()
        y = x + math.sqrt(self.r) * rng.normal(size=T)
        return x, u, y

    def kalman(self, u, y, present=None):
        """Filtered means/variances and exact log-likelihood."""
        T = len(y)
        present = np.ones(T, bool) if present is None else present
        mf, pf = np.empty(T), np.empty(T)
        mp, pp = np.empty(T), np.empty(T)
        ll = 0.0
        m, p = self.m0, self.p0
        for t in range(T):
            if t > 0:
                m = self.a * m + self.b * u[t - 1]
                p = self.a * self.a * p + self.q
            mp[t], pp[t] = m, p
            if present[t]:
                s = p + self.r
                ll += -0.5 * (math.log(2 * math.pi * s) + (y[t] - m) ** 2 / s)
                k = p / s
                m = m + k * (y[t] - m)
                p = (1 - k) * p
            mf[t], pf[t] = m, p
        return mf, pf, mp, pp, ll

    def rts(self, u, y, present=None):
        mf, pf, mp, pp, _ = self.kalman(u, y, present)
        T = len(y)
        ms, ps = mf.copy(), pf.copy()
        for t in range(T - 2, -1, -1):
            g = pf[t] * self.a / pp[t + 1]
            ms[t] = mf[t] + g * (ms[t + 1] - mp[t + 1])
            ps[t] = pf[t] + g * g * (ps[t + 1] - pp[t + 1])
        return ms, ps


class LGModelAdapter:
    """Adapts the 1-D system to the filter's model interface."""

    def __init__(self, sys):
        self.sys = sys

    def sample_next(self, s, c, rng):
        return self.sys.a * s + self.sys.b * c + math.sqrt(self.sys.q) * rng.standard_normal(s.shape)

    def init_sampler(self, n, rng):
        return (self.sys.m0 + math.sqrt(self.sys.p0) * rng.standard_normal(n))[None, :]


class LGObservations:
    def __init__(self, sys, y, present=None):
        self.sys, self.y = sys, np.asarray(y)
        self.present = np.ones(len(y), bool) if present is None else np.asarray(present)

    def __len__(self):
        return len(self.y)

    def log_likelihood(self, t, states):
        r = self.sys.r
        return -0.5 * (np.log(2 * np.pi * r) + (self.y[t] - states[0]) ** 2 / r)


def hover_log_density_batched(flat_params, shapes, s, c, s_next, dt, vel_scale=3.0, omega_scale=3.0, u_max=1.0):
    """Batch-mean transition log-density for K parameter vectors at once.

    ``flat_params`` is ``(K, P)`` laid out as the concatenation of the
    tensors in ``shapes`` (name -> shape, in order). States are ``(6, B)``.
    Written directly from the model definition: body-frame velocities of
    the current and next state (both rotated by the current heading),
    acceleration as their difference over ``dt``, one ReLU layer plus a
    linear skip path for the mean and softplus of a linear map for the std.
    """
    K = flat_params.shape[0]
    P, i = {}, 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        P[name] = flat_params[:, i:i + n].reshape((K,) + tuple(shape))
        i += n
    cth, sth = np.cos(s[2]), np.sin(s[2])

    def body(vx, vy):
        return cth * vx + sth * vy, -sth * vx + cth * vy

    lon, lat = body(s[3], s[4])
    lon1, lat1 = body(s_next[3], s_next[4])
    a = np.stack([(lon1 - lon) / dt, (lat1 - lat) / dt, (s_next[5] - s[5]) / dt])
    z = np.stack([lon / vel_scale, lat / vel_scale, s[5] / omega_scale, c[0] / u_max, c[1] / u_max])
    h = np.maximum(np.einsum("kij,jb->kib", P["W1"], z) + P["b1"][:, :, None], 0.0)
    mean = (np.einsum("kij,kjb->kib", P["W_mu"], h) + P["b_mu"][:, :, None]
            + np.einsum("kij,jb->kib", P["W_skip"], z))
    pre = np.einsum("kij,jb->kib", P["W_sig"], z) + P["b_sig"][:, :, None]
    std = np.where(pre > 30, pre, np.log1p(np.exp(np.minimum(pre, 30))))
    lp = -0.5 * ((a[None] - mean) / std) ** 2 - np.log(std) - 0.5 * math.log(2 * math.pi)
    return lp.sum(axis=1).mean(axis=1)
