"""Compiled inner loop for packet-sum evaluation.

:func:`segment_sums` fuses validity tests, Gaussian evaluation and the
per-branch sums for one particle; it is the hot path of every integration
step.  ``mtbohm.wavefunction._factors_numpy`` is the plain-numpy reference
the tests compare it with.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def segment_sums(tk, zk, bt, bz, v, p, inv4s2, inv2s2, scale, phase, rooted, et, ez, w, bounds, phases, deriv):
    N = tk.shape[0]
    B = bounds.shape[0] - 1
    h = np.zeros((B, N), dtype=np.complex128)
    dh = np.zeros((B, N), dtype=np.complex128)
    vdom = np.zeros((B, N))
    covered = np.zeros(N, dtype=np.bool_)
    for i in range(N):
        t = tk[i]
        z = zk[i]
        for b in range(B):
            best = -1.0
            for s in range(bounds[b], bounds[b + 1]):
                if (t - et[s]) - w[s] * (z - ez[s]) > 0:
                    continue
                dt = t - bt[s]
                dz = z - bz[s]
                if not rooted[s] and not (dt - w[s] * dz > 0):
                    continue
                covered[i] = True
                off = dz - v[s] * dt
                mag = scale[s] * math.exp(-off * off * inv4s2[s])
                if phases:
                    ang = p[s] * off + phase[s]
                    a = mag * complex(math.cos(ang), math.sin(ang))
                    h[b, i] += a
                    if deriv:
                        dh[b, i] += a * complex(-off * inv2s2[s], p[s])
                else:
                    h[b, i] += mag
                if mag > best:
                    best = mag
                    vdom[b, i] = v[s]
    return h, dh, vdom, covered
