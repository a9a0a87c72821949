"""Compiled inner loop for the network's mean head.

With only five inputs, ``W1 @ z`` through BLAS is dominated by memory
traffic on the ``(64, N)`` hidden activations. Looping over hidden units
with the particle index innermost keeps everything in registers and
vectorizes. Transcendentals stay in numpy, whose SIMD routines are faster
than scalar libm calls from compiled loops.
"""

import numpy as np
from numba import njit

# reassociation lets the particle loop vectorize; NaN/inf semantics are kept
_FAST = {"nsz", "contract", "arcp", "reassoc"}


@njit(cache=True, fastmath=_FAST)
def mean_head(z, W1, b1, W_mu, b_mu, W_skip):
    """``W_mu @ relu(W1 @ z + b1) + W_skip @ z + b_mu`` for ``z`` of shape ``(5, N)``."""
    N = z.shape[1]
    z0, z1, z2, z3, z4 = z[0], z[1], z[2], z[3], z[4]
    out = np.empty((3, N))
    m0, m1, m2 = out[0], out[1], out[2]
    for i in range(N):
        m0[i] = b_mu[0] + W_skip[0, 0] * z0[i] + W_skip[0, 1] * z1[i] + W_skip[0, 2] * z2[i] \
            + W_skip[0, 3] * z3[i] + W_skip[0, 4] * z4[i]
        m1[i] = b_mu[1] + W_skip[1, 0] * z0[i] + W_skip[1, 1] * z1[i] + W_skip[1, 2] * z2[i] \
            + W_skip[1, 3] * z3[i] + W_skip[1, 4] * z4[i]
        m2[i] = b_mu[2] + W_skip[2, 0] * z0[i] + W_skip[2, 1] * z1[i] + W_skip[2, 2] * z2[i] \
            + W_skip[2, 3] * z3[i] + W_skip[2, 4] * z4[i]
    for j in range(W1.shape[0]):
        w0, w1, w2, w3, w4 = W1[j, 0], W1[j, 1], W1[j, 2], W1[j, 3], W1[j, 4]
        bj, c0, c1, c2 = b1[j], W_mu[0, j], W_mu[1, j], W_mu[2, j]
        for i in range(N):
            h = max(bj + w0 * z0[i] + w1 * z1[i] + w2 * z2[i] + w3 * z3[i] + w4 * z4[i], 0.0)
            m0[i] += c0 * h
            m1[i] += c1 * h
            m2[i] += c2 * h
    return out
