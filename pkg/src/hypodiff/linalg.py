"""Batched dense linear algebra for small symmetric positive-definite blocks.

Every routine here works on stacks of matrices with shape ``(m, d, d)`` and
loops only over the (small) matrix dimension, so the cost is vectorised over
the ``m`` increments of an observation grid.
"""

import numpy as np

# Reject a factorisation when a Cholesky pivot drops below this fraction of
# the mean diagonal entry.
PIVOT_RTOL = 1e-12


class NonInvertible(ArithmeticError):
    """A covariance block (``C`` or ``V``) failed its SPD factorisation."""

    def __init__(self, which, min_eigenvalue=float("nan"), message=None):
        self.which = which
        self.min_eigenvalue = float(min_eigenvalue)
        if message is None:
            message = (f"matrix {which} is not invertible "
                       f"(min eigenvalue {self.min_eigenvalue:.3e})")
        super().__init__(message)


def batched_cholesky(M, rtol=PIVOT_RTOL):
    """Cholesky factors of a stack of symmetric matrices.

    Parameters
    ----------
    M : ndarray, shape (m, d, d)
    rtol : float
        Relative pivot tolerance; a pivot below ``rtol * trace/d`` marks the
        matrix as not positive definite.

    Returns
    -------
    L : ndarray, shape (m, d, d)
        Lower triangular factors; rows of failed matrices are filled with
        identity so downstream arithmetic stays finite.
    ok : ndarray of bool, shape (m,)
    """
    M = np.asarray(M, dtype=float)
    m, d, _ = M.shape
    L = np.zeros_like(M)
    ok = np.ones(m, dtype=bool)
    scale = np.trace(M, axis1=1, axis2=2) / d
    ok &= np.isfinite(scale) & (scale > 0)
    thresh = rtol * np.where(ok, scale, 1.0)
    for k in range(d):
        piv = M[:, k, k] - np.sum(L[:, k, :k] ** 2, axis=1)
        good = piv > thresh
        ok &= good
        lkk = np.sqrt(np.where(good, piv, 1.0))
        L[:, k, k] = lkk
        for i in range(k + 1, d):
            L[:, i, k] = (M[:, i, k] - np.sum(L[:, i, :k] * L[:, k, :k], axis=1)) / lkk
    if not ok.all():
        bad = ~ok
        L[bad] = np.eye(d)
    return L, ok


def _lower_inverse(L):
    m, d, _ = L.shape
    Linv = np.zeros_like(L)
    for i in range(d):
        Linv[:, i, i] = 1.0 / L[:, i, i]
        for j in range(i):
            acc = np.sum(L[:, i, j:i] * Linv[:, j:i, j], axis=1)
            Linv[:, i, j] = -acc / L[:, i, i]
    return Linv


def spd_inverse(M, rtol=PIVOT_RTOL):
    """Inverse and log-determinant of a stack of SPD matrices.

    Returns ``(inv, logdet, ok)``. Entries where ``ok`` is False hold
    placeholder values and must be masked by the caller.
    """
    M = np.asarray(M, dtype=float)
    d = M.shape[-1]
    if d == 1:
        a = M[:, 0, 0]
        ok = np.isfinite(a) & (a > 0)
        safe = np.where(ok, a, 1.0)
        return (1.0 / safe)[:, None, None], np.log(safe), ok
    L, ok = batched_cholesky(M, rtol)
    Linv = _lower_inverse(L)
    inv = np.einsum("mki,mkj->mij", Linv, Linv)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    return inv, logdet, ok


def min_eigenvalue(M):
    """Smallest eigenvalue of a single symmetric matrix (diagnostics only)."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        return float("nan")
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
