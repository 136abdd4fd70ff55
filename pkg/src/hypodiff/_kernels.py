"""Compiled inner loops for the contrast kernel."""

import numba as nb
import numpy as np


@nb.njit(cache=True)
def gaussian_terms(e, P, logdet, use_logdet):
    """``q_j = P_j[e_j, e_j] (+ logdet_j)`` and ``u_j = P_j e_j``."""
    m, d = e.shape
    q = np.empty(m)
    u = np.empty((m, d))
    for j in range(m):
        acc = 0.0
        for a in range(d):
            s = 0.0
            for b in range(d):
                s += P[j, a, b] * e[j, b]
            u[j, a] = s
            acc += e[j, a] * s
        q[j] = acc + logdet[j] if use_logdet else acc
    return q, u


@nb.njit(cache=True)
def gaussian_gradient(u, P, de, dSigma, use_sigma):
    """``2 u.de_k - u.dSigma_k.u + tr(P dSigma_k)`` per increment and coordinate.

    ``de`` has shape (p, m, d) and ``dSigma`` (p, m, d, d).
    """
    p, m, d = de.shape
    g = np.empty((m, p))
    for k in range(p):
        for j in range(m):
            acc = 0.0
            for a in range(d):
                acc += 2.0 * u[j, a] * de[k, j, a]
            if use_sigma:
                for a in range(d):
                    for b in range(d):
                        acc += dSigma[k, j, a, b] * (P[j, b, a] - u[j, a] * u[j, b])
            g[j, k] = acc
    return g


@nb.njit(cache=True)
def compensated_sum(x):
    """Neumaier summation down the first axis of a 2-d array."""
    m, k = x.shape
    out = np.empty(k)
    for c in range(k):
        s = 0.0
        comp = 0.0
        for j in range(m):
            v = x[j, c]
            t = s + v
            if abs(s) >= abs(v):
                comp += (s - t) + v
            else:
                comp += (v - t) + s
            s = t
        out[c] = s + comp
    return out
