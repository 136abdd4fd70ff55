"""Quasi-log-likelihood contrasts built on the normalised increments.

Every contrast has the form ``-1/2 sum_j { Sigma_j^{-1}[e_j, e_j] + log det Sigma_j }``
for a residual ``e_j`` and covariance ``Sigma_j`` (the log-det term is absent
where the covariance does not depend on the free parameters). They share
one vectorised kernel that also returns the analytic gradient; Hessians are
central differences of that gradient.
"""

from dataclasses import dataclass

import numpy as np

from ._kernels import compensated_sum, gaussian_gradient, gaussian_terms
from .linalg import NonInvertible, spd_inverse
from .model import C_matrix, S_inverse_blocks, ThetaPoint, V_matrix

MAX_FAILURE_FRACTION = 0.01
HESSIAN_STEP = 1e-4

# Free parameter blocks of each contrast, and the blocks it needs frozen.
KINDS = {
    "initial_theta1": ((1,), ()),
    "initial_theta2": ((2,), (1,)),
    "adaptive_theta3": ((3,), (1, 2)),
    "adaptive_theta23": ((2, 3), (1, 3)),
    "onestep_theta1": ((1,), (2, 3)),
    "joint": ((1, 2, 3), ()),
    "inferior_theta3": ((3,), (1, 2)),
}


@dataclass
class ContrastEvaluation:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    n_terms: int
    failures: int


class Increments:
    """Data-side quantities shared by every contrast on a grid."""

    def __init__(self, grid):
        z = grid.z
        d_x = grid.dims.d_x
        self.h = grid.h
        self.n = grid.n
        self.z_prev = np.ascontiguousarray(z[:-1])
        dz = np.diff(z, axis=0)
        self.dX = dz[:, :d_x]
        self.dY = dz[:, d_x:]


def _total(a):
    """Compensated sum over the leading axis (insensitive to term order)."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        return float(compensated_sum(a.reshape(-1, 1))[0])
    return compensated_sum(a.reshape(a.shape[0], -1)).reshape(a.shape[1:])


def normalized_increments(model, inc, theta, need=()):
    """Stacked residual ``D_j`` and its parameter derivatives.

    Returns ``(D, derivs)`` with ``D`` of shape (n, d_x + d_y) and ``derivs``
    mapping each requested block to an array of shape (n, d_x + d_y, p_block).
    """
    Z, h = inc.z_prev, inc.h
    th1, th2, th3 = theta.blocks()
    m = Z.shape[0]
    d_x = model.dims.d_x
    A = model.A(Z, th2)
    C = C_matrix(model, Z, th1)
    H = model.H(Z, th3)
    Hx = model.H_x(Z, th3)
    Hxx = model.H_xx(Z, th3)
    Hy = model.H_y(Z, th3)
    L = (np.einsum("mik,mk->mi", Hx, A) + 0.5 * np.einsum("mikl,mkl->mi", Hxx, C)
         + np.einsum("mik,mk->mi", Hy, H))
    G = H + 0.5 * h * L
    D = np.concatenate([(inc.dX - h * A) / np.sqrt(h), (inc.dY - h * G) / h ** 1.5], axis=1)

    derivs = {}
    sh = np.sqrt(h)
    if 1 in need:
        dC = model.C_theta(Z, th1)
        dY = -0.25 * sh * np.einsum("mikl,mklp->mip", Hxx, dC)
        derivs[1] = np.concatenate([np.zeros((m, d_x, dY.shape[-1])), dY], axis=1)
    if 2 in need:
        dA = model.A_theta(Z, th2)
        dY = -0.5 * sh * np.einsum("mik,mkp->mip", Hx, dA)
        derivs[2] = np.concatenate([-sh * dA, dY], axis=1)
    if 3 in need:
        dH = model.H_theta(Z, th3)
        dL = (np.einsum("mikp,mk->mip", model.H_x_theta(Z, th3), A)
              + 0.5 * np.einsum("miklp,mkl->mip", model.H_xx_theta(Z, th3), C)
              + np.einsum("mikp,mk->mip", model.H_y_theta(Z, th3), H)
              + np.einsum("mik,mkp->mip", Hy, dH))
        dY = -(dH + 0.5 * h * dL) / sh
        derivs[3] = np.concatenate([np.zeros((m, d_x, dY.shape[-1])), dY], axis=1)
    return D, derivs


def _S_derivatives(C, Hx, dC=None, dHx=None):
    """Derivatives of S along theta1 (through C) and theta3 (through Hx)."""
    out = {}
    if dC is not None:
        CH = np.einsum("mklp,mjl->mkjp", dC, Hx)
        top = np.concatenate([dC, 0.5 * CH], axis=2)
        bottom = np.concatenate([0.5 * np.swapaxes(CH, 1, 2),
                                 np.einsum("mik,mkjp->mijp", Hx, CH) / 3.0], axis=2)
        out[1] = np.concatenate([top, bottom], axis=1)
    if dHx is not None:
        d_x = C.shape[1]
        p = dHx.shape[-1]
        CdH = np.einsum("mkl,mjlp->mkjp", C, dHx)
        HCdH = np.einsum("mik,mkjp->mijp", Hx, CdH)
        top = np.concatenate([np.zeros((C.shape[0], d_x, d_x, p)), 0.5 * CdH], axis=2)
        bottom = np.concatenate([0.5 * np.swapaxes(CdH, 1, 2),
                                 (HCdH + np.swapaxes(HCdH, 1, 2)) / 3.0], axis=2)
        out[3] = np.concatenate([top, bottom], axis=1)
    return out


def _gaussian_terms(e, P, logdet, de=None, dSigma=None):
    """Per-increment ``P[e, e] + logdet`` and, if ``de`` is given, its gradient.

    ``de`` has shape (m, d, p) and ``dSigma`` (m, d, d, p).
    """
    e = np.ascontiguousarray(e, dtype=float)
    P = np.ascontiguousarray(P, dtype=float)
    use_logdet = logdet is not None
    ld = np.ascontiguousarray(logdet, dtype=float) if use_logdet else np.zeros(e.shape[0])
    q, u = gaussian_terms(e, P, ld, use_logdet)
    if de is None:
        return q, None
    de_t = np.ascontiguousarray(np.moveaxis(de, -1, 0), dtype=float)
    if dSigma is None:
        ds_t = np.zeros((1, 1, 1, 1))
    else:
        ds_t = np.ascontiguousarray(np.moveaxis(dSigma, -1, 0), dtype=float)
    return q, gaussian_gradient(u, P, de_t, ds_t, dSigma is not None)


class Contrast:
    """A quasi-log-likelihood as a function of its free parameter blocks.

    Parameters
    ----------
    model : DegenerateDiffusion
    grid : ObservationGrid
    kind : str
        One of :data:`KINDS`.
    frozen : ThetaPoint, optional
        Supplies the held-fixed blocks (e.g. initial estimates). Required
        whenever ``kind`` freezes a block.
    """

    def __init__(self, model, grid, kind, frozen=None):
        if kind not in KINDS:
            raise ValueError(f"unknown contrast kind {kind!r}")
        self.free, needs = KINDS[kind]
        if needs and frozen is None:
            raise ValueError(f"contrast {kind} needs frozen blocks {needs}")
        if frozen is not None:
            for b in needs:
                if not model.boxes[b - 1].contains(frozen.block(b)):
                    raise ValueError(f"frozen theta{b} lies outside its box")
        self.model = model
        self.kind = kind
        self.frozen = frozen
        self.inc = grid if isinstance(grid, Increments) else Increments(grid)
        sizes = model.dims.block_sizes()
        self.sizes = [sizes[b - 1] for b in self.free]
        self.dim = sum(self.sizes)

    @property
    def lower(self):
        return np.concatenate([self.model.boxes[b - 1].lower for b in self.free])

    @property
    def upper(self):
        return np.concatenate([self.model.boxes[b - 1].upper for b in self.free])

    def split(self, params):
        params = np.atleast_1d(np.asarray(params, dtype=float))
        if params.size != self.dim:
            raise ValueError(f"{self.kind} expects {self.dim} parameters, got {params.size}")
        out, i = {}, 0
        for b, p in zip(self.free, self.sizes):
            out[b] = params[i:i + p]
            i += p
        return out

    def point(self, params):
        """The ThetaPoint at which residuals are evaluated."""
        blocks = self.split(params)
        base = self.frozen.blocks() if self.frozen is not None else (None, None, None)
        full = [blocks.get(b, base[b - 1]) for b in (1, 2, 3)]
        return ThetaPoint(*full)

    def _terms(self, params, grad):
        model, inc = self.model, self.inc
        theta = self.point(params)
        Z = inc.z_prev
        need = self.free if grad else ()
        d_x = model.dims.d_x
        kind = self.kind
        dSigma = None
        dSigma_blocks = {}

        if kind == "initial_theta1":
            th1 = theta.theta1
            e = inc.dX / np.sqrt(inc.h)
            P, logdet, ok = spd_inverse(C_matrix(model, Z, th1))
            de = {1: np.zeros(e.shape + (self.dim,))} if grad else {}
            if grad:
                dSigma_blocks[1] = model.C_theta(Z, th1)
            which = "C"
        elif kind == "initial_theta2":
            th2 = theta.theta2
            e = (inc.dX - inc.h * model.A(Z, th2)) / np.sqrt(inc.h)
            P, _, ok = spd_inverse(C_matrix(model, Z, self.frozen.theta1))
            logdet = None
            de = {2: -np.sqrt(inc.h) * model.A_theta(Z, th2)} if grad else {}
            which = "C"
        elif kind == "inferior_theta3":
            D, de = normalized_increments(model, inc, theta, need)
            e = D[:, d_x:]
            de = {b: v[:, d_x:] for b, v in de.items()}
            th3 = theta.theta3
            C = C_matrix(model, Z, theta.theta1)
            Hx = model.H_x(Z, th3)
            Vinv, logdetV, ok = spd_inverse(V_matrix(Hx, C))
            P = 3.0 * Vinv
            logdet = logdetV - model.dims.d_y * np.log(3.0)
            if grad:
                dHx = model.H_x_theta(Z, th3)
                HCdH = np.einsum("mik,mkl,mjlp->mijp", Hx, C, dHx)
                dSigma_blocks[3] = (HCdH + np.swapaxes(HCdH, 1, 2)) / 3.0
            which = "V"
        else:
            D, de = normalized_increments(model, inc, theta, need)
            e = D
            if kind == "adaptive_theta23":
                w1, w3 = self.frozen.theta1, self.frozen.theta3
            else:
                w1, w3 = theta.theta1, theta.theta3
            C = C_matrix(model, Z, w1)
            Hx = model.H_x(Z, w3)
            P, logdet, okC, okV = S_inverse_blocks(C, Hx)
            ok = okC & okV
            which = "C" if not okC.all() else "V"
            if kind == "adaptive_theta23":
                logdet = None
            elif grad:
                dC = model.C_theta(Z, w1) if 1 in self.free else None
                dHx = model.H_x_theta(Z, w3) if 3 in self.free else None
                dSigma_blocks = _S_derivatives(C, Hx, dC, dHx)

        failures = int(np.count_nonzero(~ok))
        if failures > MAX_FAILURE_FRACTION * inc.n:
            raise NonInvertible(which, message=(
                f"{kind}: {failures} of {inc.n} increments have a singular {which}"))

        de_full = dSig_full = None
        if grad:
            m, d = e.shape
            de_full = np.concatenate([de[b] for b in self.free], axis=-1)
            if dSigma_blocks:
                parts = []
                for b, p in zip(self.free, self.sizes):
                    parts.append(dSigma_blocks.get(b, np.zeros((m, d, d, p))))
                dSig_full = np.concatenate(parts, axis=-1)
        q, g = _gaussian_terms(e, P, logdet, de_full, dSig_full)
        if failures:
            q = np.where(ok, q, 0.0)
            if g is not None:
                g = np.where(ok[:, None], g, 0.0)
        return q, g, failures

    def terms(self, params):
        """Per-increment contributions ``-1/2 {...}`` (zero for skipped ones)."""
        q, _, _ = self._terms(params, False)
        return -0.5 * q

    def value(self, params):
        q, _, _ = self._terms(params, False)
        return -0.5 * _total(q)

    def gradient(self, params):
        _, g, _ = self._terms(params, True)
        return -0.5 * _total(g)

    def evaluate(self, params, hessian=True):
        params = np.atleast_1d(np.asarray(params, dtype=float))
        q, g, failures = self._terms(params, True)
        value = -0.5 * _total(q)
        grad = -0.5 * _total(g)
        hess = self.hessian(params) if hessian else None
        return ContrastEvaluation(value, grad, hess, self.inc.n - failures, failures)

    def hessian(self, params):
        """Central differences of the analytic gradient, symmetrised."""
        params = np.atleast_1d(np.asarray(params, dtype=float))
        k = params.size
        Hm = np.empty((k, k))
        for i in range(k):
            step = HESSIAN_STEP * max(1.0, abs(params[i]))
            up, dn = params.copy(), params.copy()
            up[i] += step
            dn[i] -= step
            Hm[:, i] = (self.gradient(up) - self.gradient(dn)) / (2.0 * step)
        return 0.5 * (Hm + Hm.T)

    def search_hessian(self, params, grad):
        """Forward-difference Hessian reusing ``grad``; accurate enough to steer Newton."""
        params = np.atleast_1d(np.asarray(params, dtype=float))
        k = params.size
        Hm = np.empty((k, k))
        for i in range(k):
            step = HESSIAN_STEP * max(1.0, abs(params[i]))
            up = params.copy()
            up[i] += step
            Hm[:, i] = (self.gradient(up) - grad) / step
        return 0.5 * (Hm + Hm.T)


def _frozen(model, theta1=None, theta2=None, theta3=None):
    ref = model.default_theta
    fill = []
    for i, blk in enumerate((theta1, theta2, theta3)):
        if blk is None:
            blk = ref.block(i + 1) if ref is not None else np.zeros(model.dims.block_sizes()[i])
        fill.append(blk)
    return ThetaPoint(*fill)


def compute_D_j(model, grid, j, theta):
    """Normalised residual of increment ``j`` (1-based)."""
    if not 1 <= j <= grid.n:
        raise IndexError(f"increment index {j} outside 1..{grid.n}")
    inc = Increments(grid)
    sub = Increments.__new__(Increments)
    sub.h, sub.n = inc.h, 1
    sub.z_prev = inc.z_prev[j - 1:j]
    sub.dX, sub.dY = inc.dX[j - 1:j], inc.dY[j - 1:j]
    D, _ = normalized_increments(model, sub, theta)
    return D[0]


def contrast_initial_theta1(model, grid, theta1, hessian=True):
    return Contrast(model, grid, "initial_theta1").evaluate(theta1, hessian)


def contrast_initial_theta2(model, grid, theta2, theta1_hat, hessian=True):
    c = Contrast(model, grid, "initial_theta2", _frozen(model, theta1=theta1_hat))
    return c.evaluate(theta2, hessian)


def contrast_adaptive_theta3(model, grid, theta3, theta1_hat, theta2_hat, hessian=True):
    c = Contrast(model, grid, "adaptive_theta3", _frozen(model, theta1_hat, theta2_hat))
    return c.evaluate(theta3, hessian)


def contrast_adaptive_theta23(model, grid, theta2, theta3, theta1_hat, theta3_hat, hessian=True):
    c = Contrast(model, grid, "adaptive_theta23",
                 _frozen(model, theta1=theta1_hat, theta3=theta3_hat))
    return c.evaluate(np.concatenate([np.atleast_1d(theta2), np.atleast_1d(theta3)]), hessian)


def contrast_onestep_theta1(model, grid, theta1, theta2_hat, theta3_hat, hessian=True):
    c = Contrast(model, grid, "onestep_theta1", _frozen(model, theta2=theta2_hat, theta3=theta3_hat))
    return c.evaluate(theta1, hessian)


def contrast_joint(model, grid, theta, hessian=True):
    return Contrast(model, grid, "joint").evaluate(theta.vector(), hessian)


def contrast_inferior_theta3(model, grid, theta3, theta1_hat, theta2_hat, hessian=True):
    c = Contrast(model, grid, "inferior_theta3", _frozen(model, theta1_hat, theta2_hat))
    return c.evaluate(theta3, hessian)
