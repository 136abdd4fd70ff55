"""Euler-Maruyama simulation of the degenerate system on a fine grid."""

from dataclasses import dataclass

import numpy as np

from .model import C_matrix, L_H_vector, as_batch

BLOWUP_THRESHOLD = 1e8
DEFAULT_SUBSTEPS = 20
_SEED_MASK = (1 << 64) - 1
# Observations per block of pre-drawn noise; fixed so that draws do not
# depend on how many paths are simulated together.
_NOISE_BLOCK = 256


class NumericalBlowup(ArithmeticError):
    def __init__(self, step_index, path=None):
        self.step_index = int(step_index)
        self.path = path
        where = "" if path is None else f" on path {path}"
        super().__init__(f"state exceeded {BLOWUP_THRESHOLD:g} at observation step "
                         f"{self.step_index}{where}")


def rng_stream(seed, replication=0):
    """Counter-based generator for stream ``seed XOR replication``."""
    key = (int(seed) ^ int(replication)) & _SEED_MASK
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SimConfig:
    n: int
    h: float
    z0: tuple
    seed: int = 0
    substeps: int = DEFAULT_SUBSTEPS
    burn_in: int = None

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError("n must be an integer >= 2")
        if not self.h > 0:
            raise ValueError("h must be positive")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError("substeps must be an integer >= 1")
        if self.burn_in is not None and self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        object.__setattr__(self, "z0", tuple(float(v) for v in self.z0))
        object.__setattr__(self, "seed", int(self.seed) & _SEED_MASK)

    @property
    def burn(self):
        return self.n // 10 if self.burn_in is None else int(self.burn_in)

    @property
    def fine_step(self):
        return self.h / self.substeps


@dataclass(frozen=True, eq=False)
class ObservationGrid:
    """Equidistant observations; row j of ``z`` is ``Z_{t_j}``."""

    h: float
    z: np.ndarray
    dims: object

    def __post_init__(self):
        z = np.array(self.z, dtype=float)
        if z.ndim != 2 or z.shape[1] != self.dims.d_z:
            raise ValueError(f"expected observations of shape (n+1, {self.dims.d_z}), got {z.shape}")
        if z.shape[0] < 3:
            raise ValueError("need at least 3 observations (n >= 2)")
        if not np.all(np.isfinite(z)):
            raise ValueError("observations must be finite")
        if not self.h > 0:
            raise ValueError("h must be positive")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "h", float(self.h))

    @property
    def n(self):
        return self.z.shape[0] - 1

    @property
    def t(self):
        return self.h * np.arange(self.n + 1)

    @property
    def x(self):
        return self.z[:, :self.dims.d_x]

    @property
    def y(self):
        return self.z[:, self.dims.d_x:]


def simulate_paths(model, theta, cfg, seeds):
    """Simulate several independent paths, one RNG stream per seed.

    Returns
    -------
    z : ndarray, shape (len(seeds), n + 1, d_z)
    blowup : ndarray of int
        Observation step at which each path blew up, or -1. Blown-up paths
        are frozen and their rows must not be used.
    """
    dims = model.dims
    R = len(seeds)
    rngs = [rng_stream(s) for s in seeds]
    z0 = np.asarray(cfg.z0, dtype=float)
    if z0.shape != (dims.d_z,):
        raise ValueError(f"z0 must have length {dims.d_z}")
    th1, th2, th3 = theta.blocks()
    delta = cfg.fine_step
    sq = np.sqrt(delta)
    sub = cfg.substeps
    burn = cfg.burn
    total = burn + cfg.n
    out = np.empty((R, cfg.n + 1, dims.d_z))
    blowup = np.full(R, -1, dtype=int)
    z = np.tile(z0, (R, 1))
    if burn == 0:
        out[:, 0] = z
    dx = dims.d_x
    for start in range(0, total, _NOISE_BLOCK):
        k = min(_NOISE_BLOCK, total - start)
        noise = np.stack([g.standard_normal((k * sub, dims.r)) for g in rngs], axis=1)
        for i in range(k):
            for s in range(sub):
                xi = noise[i * sub + s]
                a = model.A(z, th2)
                b = model.B(z, th1)
                hy = model.H(z, th3)
                zn = z.copy()
                zn[:, :dx] += a * delta + sq * np.einsum("mij,mj->mi", b, xi)
                zn[:, dx:] += hy * delta
                # Heun corrector on Y: a left-point rule leaves an O(delta) bias
                # correlated with the X increment.
                zn[:, dx:] = z[:, dx:] + 0.5 * delta * (hy + model.H(zn, th3))
                z = zn
            q = start + i + 1
            bad = ~np.all(np.isfinite(z) & (np.abs(z) <= BLOWUP_THRESHOLD), axis=1)
            if bad.any():
                fresh = bad & (blowup < 0)
                blowup[fresh] = q
                z[bad] = z0
            if q >= burn:
                out[:, q - burn] = z
    return out, blowup


def simulate_path(model, theta, cfg):
    """Simulate one path and return its :class:`ObservationGrid`.

    X moves by ``A delta + B sqrt(delta) xi`` per fine step; Y carries no
    noise and integrates ``H`` with a Heun (trapezoid) step. Every
    ``substeps``-th fine state after the burn-in is recorded.

    Raises
    ------
    NumericalBlowup
        If a coordinate leaves ``[-1e8, 1e8]`` or becomes non-finite.
    """
    if not theta.in_boxes(model.boxes):
        raise ValueError(f"{theta} is outside the parameter boxes")
    z, blowup = simulate_paths(model, theta, cfg, [cfg.seed])
    if blowup[0] >= 0:
        raise NumericalBlowup(blowup[0])
    return ObservationGrid(cfg.h, z[0], model.dims)


def sample_wiener_pair(h, r, rng, size=None):
    """Draw ``(dw, zeta)`` with ``zeta = sqrt(3) * int int dw ds dt``.

    Per coordinate the pair is Gaussian with covariance
    ``[[h, sqrt(3)/2 h^2], [sqrt(3)/2 h^2, h^3]]``.
    """
    if h < 0:
        raise ValueError("h must be non-negative")
    shape = (r,) if size is None else (size, r)
    xi1 = rng.standard_normal(shape)
    xi2 = rng.standard_normal(shape)
    dw = np.sqrt(h) * xi1
    zeta = h ** 1.5 * (0.5 * np.sqrt(3.0) * xi1 + 0.5 * xi2)
    return dw, zeta


def simulate_linearized_increment(model, z, theta, h, rng, size=None):
    """Leading-order one-step increment from state ``z``.

    ``dX = h A + B dw`` and ``dY = h G_n + H_x B zeta / sqrt(3)``; used to
    check the local Gaussian structure of the increments.
    """
    Z, _ = as_batch(z)
    th1, th2, th3 = theta.blocks()
    dw, zeta = sample_wiener_pair(h, model.dims.r, rng, size)
    B = model.B(Z, th1)[0]
    Hx = model.H_x(Z, th3)[0]
    A = model.A(Z, th2)[0]
    G = model.H(Z, th3)[0] + 0.5 * h * L_H_vector(model, Z, th1, th2, th3, C_matrix(model, Z, th1))[0]
    dX = h * A + dw @ B.T
    dY = h * G + (zeta / np.sqrt(3.0)) @ (Hx @ B).T
    return dX, dY
