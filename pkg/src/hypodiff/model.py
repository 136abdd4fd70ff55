"""Degenerate diffusion model abstraction and the coefficient algebra.

The system is

    dX_t = A(Z_t, theta2) dt + B(Z_t, theta1) dw_t
    dY_t = H(Z_t, theta3) dt

with ``Z = (X, Y)``. Model methods are batched: ``z`` has shape
``(m, d_x + d_y)`` and every evaluator returns arrays with a leading axis of
length ``m``. Parameter blocks are 1-d float arrays.
"""

from dataclasses import dataclass

import numpy as np

from .linalg import NonInvertible, min_eigenvalue, spd_inverse

FD_STEP_FIRST = 1e-5
FD_STEP_SECOND = 1e-4
FD_STEP_THIRD = 2e-3


@dataclass(frozen=True)
class Dimensions:
    d_x: int
    d_y: int
    r: int
    p1: int
    p2: int
    p3: int

    def __post_init__(self):
        for name in ("d_x", "d_y", "r", "p1", "p2", "p3"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"dimension {name} must be a positive integer, got {value}")

    @property
    def d_z(self):
        return self.d_x + self.d_y

    @property
    def p(self):
        return self.p1 + self.p2 + self.p3

    def block_sizes(self):
        return (self.p1, self.p2, self.p3)


@dataclass(frozen=True, eq=False)
class ParameterBox:
    """Bounded box ``lower < theta < upper`` for one parameter block."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if not np.all(lo < hi):
            raise ValueError(f"box requires lower < upper componentwise: {lo} vs {hi}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return self.lower.size

    def contains(self, theta, closed=True):
        theta = np.asarray(theta, dtype=float)
        if closed:
            return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))
        return bool(np.all(theta > self.lower) and np.all(theta < self.upper))

    def clip(self, theta):
        return np.clip(np.asarray(theta, dtype=float), self.lower, self.upper)

    def on_boundary(self, theta):
        theta = np.asarray(theta, dtype=float)
        return (theta <= self.lower) | (theta >= self.upper)


@dataclass(frozen=True, eq=False)
class ThetaPoint:
    """A full parameter value ``(theta1, theta2, theta3)``."""

    theta1: np.ndarray
    theta2: np.ndarray
    theta3: np.ndarray

    def __post_init__(self):
        for name in ("theta1", "theta2", "theta3"):
            arr = np.atleast_1d(np.array(getattr(self, name), dtype=float))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def block(self, i):
        return (self.theta1, self.theta2, self.theta3)[i - 1]

    def replace(self, **blocks):
        current = {"theta1": self.theta1, "theta2": self.theta2, "theta3": self.theta3}
        current.update(blocks)
        return ThetaPoint(**current)

    def vector(self):
        return np.concatenate([self.theta1, self.theta2, self.theta3])

    @classmethod
    def from_vector(cls, v, dims):
        v = np.asarray(v, dtype=float)
        a, b = dims.p1, dims.p1 + dims.p2
        return cls(v[:a], v[a:b], v[b:])

    def clip(self, boxes):
        return ThetaPoint(*(box.clip(t) for box, t in zip(boxes, self.blocks())))

    def blocks(self):
        return (self.theta1, self.theta2, self.theta3)

    def in_boxes(self, boxes, closed=True):
        return all(box.contains(t, closed) for box, t in zip(boxes, self.blocks()))

    def to_dict(self):
        return {"theta1": self.theta1.tolist(), "theta2": self.theta2.tolist(),
                "theta3": self.theta3.tolist()}

    def __repr__(self):
        return (f"ThetaPoint(theta1={self.theta1.tolist()}, theta2={self.theta2.tolist()}, "
                f"theta3={self.theta3.tolist()})")


def _fd_theta(f, z, theta, step=FD_STEP_FIRST):
    """Central differences of ``f(z, theta)`` in theta, stacked on a new last axis."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for k in range(theta.size):
        dk = step * max(1.0, abs(theta[k]))
        tp, tm = theta.copy(), theta.copy()
        tp[k] += dk
        tm[k] -= dk
        cols.append((f(z, tp) - f(z, tm)) / (2.0 * dk))
    return np.stack(cols, axis=-1)


def _fd_state(f, z, theta, columns, step):
    """Central differences of ``f(z, theta)`` in the given state columns."""
    cols = []
    for c in columns:
        dk = step * np.maximum(1.0, np.abs(z[:, c]))
        zp, zm = z.copy(), z.copy()
        zp[:, c] += dk
        zm[:, c] -= dk
        diff = f(zp, theta) - f(zm, theta)
        dk = dk.reshape((-1,) + (1,) * (diff.ndim - 1))
        cols.append(diff / (2.0 * dk))
    return np.stack(cols, axis=-1)


def _fd_state_hessian(f, z, theta, d_x, step):
    """Second differences of ``f`` in the X columns, shape (m, out, d_x, d_x)."""
    e = step * np.maximum(1.0, np.abs(z[:, :d_x]))

    def shifted(signs):
        zz = z.copy()
        for c, s in signs:
            zz[:, c] += s * e[:, c]
        return f(zz, theta)

    f0 = f(z, theta)
    out = np.empty(f0.shape + (d_x, d_x))
    for k in range(d_x):
        ek = e[:, k].reshape((-1,) + (1,) * (f0.ndim - 1))
        out[..., k, k] = (shifted([(k, 1)]) - 2.0 * f0 + shifted([(k, -1)])) / ek ** 2
        for l in range(k):
            el = e[:, l].reshape(ek.shape)
            v = (shifted([(k, 1), (l, 1)]) - shifted([(k, 1), (l, -1)])
                 - shifted([(k, -1), (l, 1)]) + shifted([(k, -1), (l, -1)])) / (4.0 * ek * el)
            out[..., k, l] = v
            out[..., l, k] = v
    return out


class DegenerateDiffusion:
    """Base class for a hypo-elliptic system.

    Subclasses must implement :meth:`A`, :meth:`B` and :meth:`H`. Every
    derivative has a central finite-difference default; override it with an
    analytic version where available. Instances are immutable and carry no
    evaluation state, so they can be shared freely.

    Shapes (``m`` states)::

        A        (m, d_x)           A_theta    (m, d_x, p2)
        B        (m, d_x, r)        B_theta    (m, d_x, r, p1)
        H        (m, d_y)           H_theta    (m, d_y, p3)
        H_x      (m, d_y, d_x)      H_x_theta  (m, d_y, d_x, p3)
        H_xx     (m, d_y, d_x, d_x) H_xx_theta (m, d_y, d_x, d_x, p3)
        H_y      (m, d_y, d_y)      H_y_theta  (m, d_y, d_y, p3)
    """

    name = "custom"
    _DERIVATIVES = ("A_theta", "B_theta", "H_theta", "H_x", "H_xx", "H_y",
                    "H_x_theta", "H_xx_theta", "H_y_theta")

    def __init__(self, dims, boxes, default_theta=None):
        if len(boxes) != 3:
            raise ValueError("expected one ParameterBox per parameter block")
        for box, p in zip(boxes, dims.block_sizes()):
            if box.dim != p:
                raise ValueError(f"box of dimension {box.dim} for a block of size {p}")
        self.dims = dims
        self.boxes = tuple(boxes)
        self.default_theta = default_theta

    @property
    def derivative_mode(self):
        base = DegenerateDiffusion
        overridden = [getattr(type(self), n) is not getattr(base, n) for n in self._DERIVATIVES]
        if all(overridden):
            return "analytic"
        return "finite-difference" if not any(overridden) else "mixed"

    def split(self, z):
        return z[:, :self.dims.d_x], z[:, self.dims.d_x:]

    def A(self, z, theta2):
        raise NotImplementedError

    def B(self, z, theta1):
        raise NotImplementedError

    def H(self, z, theta3):
        raise NotImplementedError

    def A_theta(self, z, theta2):
        return _fd_theta(self.A, z, theta2)

    def B_theta(self, z, theta1):
        return _fd_theta(self.B, z, theta1)

    def H_theta(self, z, theta3):
        return _fd_theta(self.H, z, theta3)

    def H_x(self, z, theta3):
        return _fd_state(self.H, z, theta3, range(self.dims.d_x), FD_STEP_FIRST)

    def H_xx(self, z, theta3):
        return _fd_state_hessian(self.H, z, theta3, self.dims.d_x, FD_STEP_SECOND)

    def H_y(self, z, theta3):
        cols = range(self.dims.d_x, self.dims.d_z)
        return _fd_state(self.H, z, theta3, cols, FD_STEP_FIRST)

    def H_x_theta(self, z, theta3):
        return _fd_theta(self.H_x, z, theta3)

    def H_xx_theta(self, z, theta3):
        # Third-order quantity: both differences use the larger step to keep
        # rounding noise (~eps / step^3) well below 1e-5.
        def hxx(zz, t):
            return _fd_state_hessian(self.H, zz, t, self.dims.d_x, FD_STEP_THIRD)
        return _fd_theta(hxx, z, theta3, FD_STEP_THIRD)

    def H_y_theta(self, z, theta3):
        return _fd_theta(self.H_y, z, theta3)

    def C_theta(self, z, theta1):
        """Derivative of ``C = B B^T`` in theta1, shape (m, d_x, d_x, p1)."""
        B = self.B(z, theta1)
        dB = self.B_theta(z, theta1)
        half = np.einsum("mikp,mjk->mijp", dB, B)
        return half + np.swapaxes(half, 1, 2)


class FiniteDifferenceModel(DegenerateDiffusion):
    """Wrap a model so that every derivative comes from finite differences."""

    def __init__(self, model):
        super().__init__(model.dims, model.boxes, model.default_theta)
        self.base = model
        self.name = f"{model.name}[fd]"

    def A(self, z, theta2):
        return self.base.A(z, theta2)

    def B(self, z, theta1):
        return self.base.B(z, theta1)

    def H(self, z, theta3):
        return self.base.H(z, theta3)


def as_batch(z):
    """Promote a single state to a batch of one; return ``(batch, was_single)``."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        return z[None, :], True
    return z, False


def _unbatch(x, single):
    return x[0] if single else x


# Batched building blocks (z is (m, d_z)).

def C_matrix(model, Z, theta1):
    B = model.B(Z, theta1)
    return np.einsum("mik,mjk->mij", B, B)


def V_matrix(Hx, C):
    return np.einsum("mik,mkl,mjl->mij", Hx, C, Hx)


def L_H_vector(model, Z, theta1, theta2, theta3, C=None):
    if C is None:
        C = C_matrix(model, Z, theta1)
    Hx = model.H_x(Z, theta3)
    out = np.einsum("mik,mk->mi", Hx, model.A(Z, theta2))
    out += 0.5 * np.einsum("mikl,mkl->mi", model.H_xx(Z, theta3), C)
    out += np.einsum("mik,mk->mi", model.H_y(Z, theta3), model.H(Z, theta3))
    return out


def S_matrix(C, Hx):
    """Assemble ``[[C, C Hx^T/2], [Hx C/2, Hx C Hx^T/3]]``."""
    CHt = np.einsum("mik,mjk->mij", C, Hx)
    top = np.concatenate([C, 0.5 * CHt], axis=2)
    bottom = np.concatenate([0.5 * np.swapaxes(CHt, 1, 2), V_matrix(Hx, C) / 3.0], axis=2)
    return np.concatenate([top, bottom], axis=1)


def S_inverse_blocks(C, Hx):
    """Closed-form inverse and log-determinant of S from C and Hx.

    Returns ``(S_inv, logdet_S, ok_C, ok_V)``; entries with a failed
    factorisation carry placeholder values.
    """
    d_y = Hx.shape[1]
    Cinv, logdetC, okC = spd_inverse(C)
    V = V_matrix(Hx, C)
    Vinv, logdetV, okV = spd_inverse(V)
    VinvHx = np.einsum("mik,mkj->mij", Vinv, Hx)
    top_left = Cinv + 3.0 * np.einsum("mki,mkj->mij", Hx, VinvHx)
    top_right = -6.0 * np.swapaxes(VinvHx, 1, 2)
    top = np.concatenate([top_left, top_right], axis=2)
    bottom = np.concatenate([-6.0 * VinvHx, 12.0 * Vinv], axis=2)
    Sinv = np.concatenate([top, bottom], axis=1)
    logdet = logdetC + logdetV - d_y * np.log(12.0)
    return Sinv, logdet, okC, okV


# Public single-point (or batched) evaluators.

def eval_C(model, z, theta1):
    """``C = B B^T`` at a state (or batch of states)."""
    Z, single = as_batch(z)
    return _unbatch(C_matrix(model, Z, theta1), single)


def eval_V(model, z, theta1, theta3):
    """``V = H_x C H_x^T``."""
    Z, single = as_batch(z)
    return _unbatch(V_matrix(model.H_x(Z, theta3), C_matrix(model, Z, theta1)), single)


def eval_L_H(model, z, theta1, theta2, theta3):
    """Generator of X applied to H, plus the Y-transport term."""
    Z, single = as_batch(z)
    return _unbatch(L_H_vector(model, Z, theta1, theta2, theta3), single)


def eval_G_n(model, z, theta, h):
    """``G_n = H + (h/2) L_H``; ``h = 0`` is allowed and returns ``H``."""
    if h < 0:
        raise ValueError("step h must be non-negative")
    Z, single = as_batch(z)
    G = model.H(Z, theta.theta3) + 0.5 * h * L_H_vector(model, Z, *theta.blocks())
    return _unbatch(G, single)


def eval_S(model, z, theta1, theta3):
    Z, single = as_batch(z)
    return _unbatch(S_matrix(C_matrix(model, Z, theta1), model.H_x(Z, theta3)), single)


def eval_S_inv(model, z, theta1, theta3):
    """Analytic inverse of S and ``log det S``.

    Raises
    ------
    NonInvertible
        If C or V fails its Cholesky factorisation at any of the states.
    """
    Z, single = as_batch(z)
    C = C_matrix(model, Z, theta1)
    Hx = model.H_x(Z, theta3)
    Sinv, logdet, okC, okV = S_inverse_blocks(C, Hx)
    if not okC.all():
        i = int(np.flatnonzero(~okC)[0])
        raise NonInvertible("C", min_eigenvalue(C[i]))
    if not okV.all():
        i = int(np.flatnonzero(~okV)[0])
        raise NonInvertible("V", min_eigenvalue(V_matrix(Hx[i:i + 1], C[i:i + 1])[0]))
    if single:
        return Sinv[0], float(logdet[0])
    return Sinv, logdet


def eval_kappa(model, z, theta1, theta3):
    """``kappa = 3^{-1/2} H_x B``, so that ``3 kappa kappa^T = V``."""
    Z, single = as_batch(z)
    K = np.einsum("mik,mkr->mir", model.H_x(Z, theta3), model.B(Z, theta1)) / np.sqrt(3.0)
    return _unbatch(K, single)
