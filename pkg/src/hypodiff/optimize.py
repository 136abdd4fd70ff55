"""Multistart projected Newton ascent on a box."""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .linalg import NonInvertible


class OptimFailed(RuntimeError):
    def __init__(self, message, stage=None):
        self.stage = stage
        prefix = f"[{stage}] " if stage else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class OptimizerConfig:
    multistart_grid_points_per_dim: int = 5
    max_newton_iters: int = 50
    gradient_tol: float = 1e-8
    armijo_c: float = 1e-4
    max_starts: int = 200

    def __post_init__(self):
        if self.multistart_grid_points_per_dim < 1 or self.max_starts < 1:
            raise ValueError("grid points and start cap must be >= 1")
        if not (self.gradient_tol > 0 and self.armijo_c > 0 and self.max_newton_iters > 0):
            raise ValueError("optimizer tolerances must be positive")


@dataclass
class OptimResult:
    x: np.ndarray
    value: float
    iterations: int
    grad_norm: float
    converged: bool
    at_boundary: np.ndarray
    start_index: int
    runs: list = field(default_factory=list)

    @property
    def boundary(self):
        return bool(np.any(self.at_boundary))


class FunctionObjective:
    """Adapter giving plain callables the value/gradient/hessian protocol."""

    def __init__(self, value, gradient=None, hessian=None, step=1e-5):
        self._value = value
        self._gradient = gradient
        self._hessian = hessian
        self.step = step

    def value(self, x):
        return float(self._value(np.asarray(x, dtype=float)))

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self._gradient is not None:
            return np.atleast_1d(np.asarray(self._gradient(x), dtype=float))
        g = np.empty(x.size)
        for i in range(x.size):
            e = self.step * max(1.0, abs(x[i]))
            up, dn = x.copy(), x.copy()
            up[i] += e
            dn[i] -= e
            g[i] = (self.value(up) - self.value(dn)) / (2 * e)
        return g

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        if self._hessian is not None:
            return np.atleast_2d(np.asarray(self._hessian(x), dtype=float))
        Hm = np.empty((x.size, x.size))
        for i in range(x.size):
            e = 1e-4 * max(1.0, abs(x[i]))
            up, dn = x.copy(), x.copy()
            up[i] += e
            dn[i] -= e
            Hm[:, i] = (self.gradient(up) - self.gradient(dn)) / (2 * e)
        return 0.5 * (Hm + Hm.T)


def _safe_value(objective, x):
    try:
        v = objective.value(x)
    except (NonInvertible, FloatingPointError):
        return -np.inf
    return v if np.isfinite(v) else -np.inf


def start_grid(lower, upper, points_per_dim, max_starts):
    """Cell-midpoint grid over the box, thinned to at most ``max_starts`` points."""
    dim = lower.size
    k = points_per_dim
    while k > 1 and k ** dim > max_starts:
        k -= 1
    axes = [lower[i] + (np.arange(k) + 0.5) / k * (upper[i] - lower[i]) for i in range(dim)]
    return np.array(list(itertools.product(*axes)))


def _projected(g, x, lower, upper):
    blocked = ((x <= lower) & (g < 0)) | ((x >= upper) & (g > 0))
    return np.where(blocked, 0.0, g), ~blocked


def newton_ascent(objective, x0, lower, upper, cfg):
    """Projected Newton ascent with Armijo backtracking from one start."""
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    f = _safe_value(objective, x)
    if not np.isfinite(f):
        return x, f, 0, np.inf, False
    converged = False
    pg_norm = np.inf
    it = 0
    for it in range(1, cfg.max_newton_iters + 1):
        g = objective.gradient(x)
        pg, free = _projected(g, x, lower, upper)
        pg_norm = float(np.max(np.abs(pg)))
        if pg_norm <= cfg.gradient_tol * max(1.0, abs(f)):
            converged = True
            break
        if hasattr(objective, "search_hessian"):
            Hfull = objective.search_hessian(x, g)
        else:
            Hfull = objective.hessian(x)
        Hf = Hfull[np.ix_(free, free)]
        w, U = np.linalg.eigh(Hf)
        # Ascent needs a negative definite model; flip and floor the curvature.
        floor = 1e-10 * max(1.0, np.max(np.abs(w)))
        curv = np.maximum(np.abs(w), floor)
        d = np.zeros_like(x)
        d[free] = U @ ((U.T @ g[free]) / curv)
        t = 1.0
        accepted = False
        for _ in range(60):
            xn = np.clip(x + t * d, lower, upper)
            fn = _safe_value(objective, xn)
            if fn >= f + cfg.armijo_c * float(g @ (xn - x)) and np.isfinite(fn):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # No ascent possible at working precision: treat as stationary.
            converged = pg_norm <= 1e-6 * max(1.0, abs(f)) or np.all(np.abs(t * d) <= 1e-12 * (1 + np.abs(x)))
            break
        step = xn - x
        x, f = xn, fn
        if np.all(np.abs(step) <= 1e-12 * (1.0 + np.abs(x))):
            g = objective.gradient(x)
            pg, _ = _projected(g, x, lower, upper)
            pg_norm = float(np.max(np.abs(pg)))
            converged = True
            break
    return x, f, it, pg_norm, converged


def maximize(objective, lower, upper, cfg=None, starts=(), stage=None):
    """Maximise ``objective`` over the closed box ``[lower, upper]``.

    The box is scanned on a multistart grid; Newton ascent then runs from
    every explicit start (in order) followed by the best grid point. The best
    final value wins, ties within 1e-12 going to the lowest start index.

    Raises
    ------
    OptimFailed
        If no run converges and the best point still has a projected
        gradient beyond tolerance.
    """
    cfg = cfg or OptimizerConfig()
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    grid = start_grid(lower, upper, cfg.multistart_grid_points_per_dim, cfg.max_starts)
    values = np.array([_safe_value(objective, p) for p in grid])
    candidates = [np.clip(np.asarray(s, dtype=float), lower, upper) for s in starts]
    if np.any(np.isfinite(values)):
        candidates.append(grid[int(np.argmax(values))])
    if not candidates:
        raise OptimFailed("objective is not finite anywhere on the start grid", stage)

    runs = []
    best = None
    for idx, x0 in enumerate(candidates):
        x, f, iters, pg, conv = newton_ascent(objective, x0, lower, upper, cfg)
        runs.append((idx, f, conv))
        if not np.isfinite(f):
            continue
        if best is None or f > best[1] + 1e-12 * max(1.0, abs(best[1])):
            best = (x, f, iters, pg, conv, idx)
    if best is None:
        raise OptimFailed("every Newton run started at a non-finite value", stage)
    x, f, iters, pg, conv, idx = best
    if not any(r[2] for r in runs) and pg > cfg.gradient_tol * max(1.0, abs(f)):
        raise OptimFailed(f"no start converged (projected gradient {pg:.3e})", stage)
    at_bnd = (x <= lower) | (x >= upper)
    return OptimResult(x, f, iters, pg, conv, at_bnd, idx, runs)
