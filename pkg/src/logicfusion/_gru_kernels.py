"""Compiled time loops of the fused bidirectional GRU.

Both directions are stacked on the leading axis; the backward direction is
passed in already reversed.  Gates are packed ``[reset, update, candidate]``.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def gru_forward(xw, U):
    """xw: (D, m, 3k) input projection plus bias; U: (D, k, 3k)."""
    D, m, k3 = xw.shape
    k = k3 // 3
    hs = np.empty((D, m, k))
    rz = np.empty((D, m, 2 * k))
    n = np.empty((D, m, k))
    hun = np.empty((D, m, k))
    prev = np.empty((D, m, k))
    hu = np.empty(k3)
    for d in range(D):
        h = np.zeros(k)
        for t in range(m):
            for j in range(k3):
                acc = 0.0
                for i in range(k):
                    acc += h[i] * U[d, i, j]
                hu[j] = acc
            for j in range(k):
                r = _sigmoid(xw[d, t, j] + hu[j])
                z = _sigmoid(xw[d, t, k + j] + hu[k + j])
                c = math.tanh(xw[d, t, 2 * k + j] + r * hu[2 * k + j])
                rz[d, t, j] = r
                rz[d, t, k + j] = z
                n[d, t, j] = c
                hun[d, t, j] = hu[2 * k + j]
                prev[d, t, j] = h[j]
            for j in range(k):
                z = rz[d, t, k + j]
                h[j] = (1.0 - z) * n[d, t, j] + z * h[j]
                hs[d, t, j] = h[j]
    return hs, rz, n, hun, prev


@njit(cache=True)
def gru_backward(dhs, U, rz, n, hun, prev):
    """Returns (dxw, dhu); dU is ``prev^T @ dhu`` per direction."""
    D, m, k = dhs.shape
    dxw = np.empty((D, m, 3 * k))
    dhu = np.empty((D, m, 3 * k))
    dh = np.empty(k)
    for d in range(D):
        dh_next = np.zeros(k)
        for t in range(m - 1, -1, -1):
            for j in range(k):
                g = dhs[d, t, j] + dh_next[j]
                dh[j] = g
                r = rz[d, t, j]
                z = rz[d, t, k + j]
                c = n[d, t, j]
                da_n = g * (1.0 - z) * (1.0 - c * c)
                da_z = g * (prev[d, t, j] - c) * z * (1.0 - z)
                da_r = da_n * hun[d, t, j] * r * (1.0 - r)
                dxw[d, t, j] = da_r
                dxw[d, t, k + j] = da_z
                dxw[d, t, 2 * k + j] = da_n
                dhu[d, t, j] = da_r
                dhu[d, t, k + j] = da_z
                dhu[d, t, 2 * k + j] = da_n * r
            for i in range(k):
                acc = dh[i] * rz[d, t, k + i]
                for j in range(3 * k):
                    acc += dhu[d, t, j] * U[d, i, j]
                dh_next[i] = acc
    return dxw, dhu
