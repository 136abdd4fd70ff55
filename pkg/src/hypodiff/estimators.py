"""Adaptive, one-step, joint and Y-only estimators plus plug-in information."""

from dataclasses import dataclass, field

import numpy as np

from .contrasts import MAX_FAILURE_FRACTION, Contrast, Increments
from .linalg import NonInvertible, spd_inverse
from .model import C_matrix, ThetaPoint, V_matrix
from .optimize import OptimFailed, OptimizerConfig, maximize

MIN_OBSERVATIONS = 100
MAX_CONDITION = 1e12
METHODS = ("adaptive", "joint", "inferior_theta3", "initial_only")


@dataclass
class EstimateReport:
    method: str
    theta_hat: ThetaPoint
    n: int
    h: float
    gamma: dict
    stderr: ThetaPoint
    onestep_event_ok: bool = True
    onestep_on_boundary: bool = False
    initial: ThetaPoint = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def rate_scales(self):
        return rate_scales(self.n, self.h)

    def to_dict(self):
        out = {"method": self.method, "n": self.n, "h": self.h}
        for i in (1, 2, 3):
            out[f"theta{i}"] = self.theta_hat.block(i).tolist()
        for i in (1, 2, 3):
            out[f"stderr{i}"] = self.stderr.block(i).tolist()
        out["gamma"] = {k: np.asarray(v).ravel().tolist() for k, v in self.gamma.items()}
        out["gamma_shapes"] = {k: list(np.asarray(v).shape) for k, v in self.gamma.items()}
        out["rate_scales"] = list(self.rate_scales)
        out["flags"] = {"onestep_event_ok": bool(self.onestep_event_ok),
                        "onestep_on_boundary": bool(self.onestep_on_boundary)}
        out["initial"] = None if self.initial is None else self.initial.to_dict()
        out["diagnostics"] = self.diagnostics
        return out


def rate_scales(n, h):
    """Normalising rates for (theta1, theta2, theta3)."""
    return (float(np.sqrt(n)), float(np.sqrt(n * h)), float(np.sqrt(n / h)))


def _diag(res):
    return {"iterations": int(res.iterations), "grad_norm": float(res.grad_norm),
            "converged": bool(res.converged), "at_boundary": bool(res.boundary)}


def _fit(contrast, cfg, stage, starts=()):
    try:
        res = maximize(contrast, contrast.lower, contrast.upper, cfg, starts, stage)
    except NonInvertible as exc:
        raise OptimFailed(str(exc), stage) from exc
    return res


def initial_estimates(model, grid, cfg=None, inc=None):
    """Sequential QMLEs theta1^0 -> theta2^0 -> theta3^0.

    Returns ``(theta0, diagnostics)``.
    """
    cfg = cfg or OptimizerConfig()
    if grid.n < MIN_OBSERVATIONS:
        raise ValueError(f"need at least {MIN_OBSERVATIONS} increments, got {grid.n}")
    inc = inc or Increments(grid)
    ref = model.default_theta or ThetaPoint(*(0.5 * (b.lower + b.upper) for b in model.boxes))
    diags = {}
    r1 = _fit(Contrast(model, inc, "initial_theta1"), cfg, "initial_theta1")
    diags["initial_theta1"] = _diag(r1)
    th = ref.replace(theta1=r1.x)
    r2 = _fit(Contrast(model, inc, "initial_theta2", th), cfg, "initial_theta2")
    diags["initial_theta2"] = _diag(r2)
    th = th.replace(theta2=r2.x)
    r3 = _fit(Contrast(model, inc, "adaptive_theta3", th), cfg, "adaptive_theta3")
    diags["adaptive_theta3"] = _diag(r3)
    return th.replace(theta3=r3.x), diags


def newton_step(theta, gradient, hessian):
    """One Newton update ``theta - H^{-1} g``.

    Returns ``(new_theta, ok)``; ``ok`` is False when the Hessian is singular
    or its condition number exceeds 1e12.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    Hm = np.atleast_2d(np.asarray(hessian, dtype=float))
    g = np.atleast_1d(np.asarray(gradient, dtype=float))
    if not np.all(np.isfinite(Hm)) or not np.all(np.isfinite(g)):
        return theta, False
    cond = np.linalg.cond(Hm)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        return theta, False
    return theta - np.linalg.solve(Hm, g), True


def _onestep(model, inc, theta0):
    """Apply both one-step maps at the initial estimate."""
    b1, b2, b3 = model.boxes
    c1 = Contrast(model, inc, "onestep_theta1", theta0)
    ev1 = c1.evaluate(theta0.theta1)
    t1, ok1 = newton_step(theta0.theta1, ev1.gradient, ev1.hessian)
    ok1 = ok1 and b1.contains(t1)

    c23 = Contrast(model, inc, "adaptive_theta23", theta0)
    x23 = np.concatenate([theta0.theta2, theta0.theta3])
    ev23 = c23.evaluate(x23)
    t23, ok23 = newton_step(x23, ev23.gradient, ev23.hessian)
    p2 = model.dims.p2
    t2, t3 = t23[:p2], t23[p2:]
    ok23 = ok23 and b2.contains(t2) and b3.contains(t3)

    ok = bool(ok1 and ok23)
    theta = ThetaPoint(t1, t2, t3) if ok else theta0
    on_boundary = ok and bool(any(np.any(b.on_boundary(t)) for b, t in zip(model.boxes, theta.blocks())))
    diag = {"onestep_theta1_ok": bool(ok1), "onestep_theta23_ok": bool(ok23),
            "hessian_theta1": ev1.hessian.tolist(), "hessian_theta23": ev23.hessian.tolist()}
    return theta, ok, on_boundary, diag


def _stderr(gamma_blocks, n, h, inflate3=1.0):
    scales = rate_scales(n, h)
    out = []
    for G, s in zip(gamma_blocks, scales):
        G = np.atleast_2d(G)
        try:
            var = np.diag(np.linalg.inv(G))
        except np.linalg.LinAlgError:
            var = np.full(G.shape[0], np.nan)
        out.append(np.sqrt(np.where(var > 0, var, np.nan)) / s)
    out[2] = out[2] * np.sqrt(inflate3)
    return ThetaPoint(*out)


def _report(model, grid, method, theta, inc, **kw):
    gamma = plugin_information(model, grid, theta, inc=inc)
    if method in ("adaptive", "joint"):
        blocks = (gamma["gamma11"], gamma["gamma22"], gamma["gamma33"])
        inflate = 1.0
    else:
        blocks = (gamma["gamma1_initial"], gamma["gamma22"], gamma["gamma33"])
        inflate = 4.0 if method == "inferior_theta3" else 1.0
    se = _stderr(blocks, grid.n, grid.h, inflate)
    return EstimateReport(method, theta, grid.n, grid.h, gamma, se, **kw)


def estimate_all(model, grid, cfg=None, methods=METHODS):
    """Run several estimators sharing the initial stage.

    Returns a dict method -> EstimateReport. Stage failures raise
    :class:`OptimFailed` tagged with the stage name.
    """
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown estimators {sorted(unknown)}")
    cfg = cfg or OptimizerConfig()
    inc = Increments(grid)
    theta0, diags = initial_estimates(model, grid, cfg, inc)
    reports = {}
    adaptive = None
    if "adaptive" in methods or "joint" in methods:
        try:
            adaptive, ok, on_bnd, d1 = _onestep(model, inc, theta0)
        except NonInvertible as exc:
            raise OptimFailed(str(exc), "onestep") from exc
        if "adaptive" in methods:
            reports["adaptive"] = _report(model, grid, "adaptive", adaptive, inc,
                                          onestep_event_ok=ok, onestep_on_boundary=on_bnd,
                                          initial=theta0, diagnostics={**diags, "onestep": d1})
    if "joint" in methods:
        c = Contrast(model, inc, "joint")
        res = _fit(c, cfg, "joint", starts=[adaptive.vector()])
        thj = ThetaPoint.from_vector(res.x, model.dims)
        reports["joint"] = _report(model, grid, "joint", thj, inc, initial=theta0,
                                   diagnostics={**diags, "joint": _diag(res)})
    if "inferior_theta3" in methods:
        c = Contrast(model, inc, "inferior_theta3", theta0)
        res = _fit(c, cfg, "inferior_theta3")
        thi = theta0.replace(theta3=res.x)
        reports["inferior_theta3"] = _report(model, grid, "inferior_theta3", thi, inc, initial=theta0,
                                             diagnostics={**diags, "inferior_theta3": _diag(res)})
    if "initial_only" in methods:
        reports["initial_only"] = _report(model, grid, "initial_only", theta0, inc, initial=theta0,
                                          diagnostics=dict(diags))
    return reports


def estimate_adaptive(model, grid, cfg=None):
    """Initial QMLEs followed by the one-step Newton maps on both blocks."""
    return estimate_all(model, grid, cfg, ("adaptive",))["adaptive"]


def estimate_joint(model, grid, cfg=None, warm_start=True):
    """Joint QMLE over the whole box.

    With ``warm_start`` the adaptive estimate seeds the search alongside the
    grid starts; otherwise only the grid is used.
    """
    if warm_start:
        return estimate_all(model, grid, cfg, ("joint",))["joint"]
    cfg = cfg or OptimizerConfig()
    if grid.n < MIN_OBSERVATIONS:
        raise ValueError(f"need at least {MIN_OBSERVATIONS} increments, got {grid.n}")
    inc = Increments(grid)
    res = _fit(Contrast(model, inc, "joint"), cfg, "joint")
    thj = ThetaPoint.from_vector(res.x, model.dims)
    return _report(model, grid, "joint", thj, inc, diagnostics={"joint": _diag(res)})


def estimate_inferior_theta3(model, grid, cfg=None):
    return estimate_all(model, grid, cfg, ("inferior_theta3",))["inferior_theta3"]


def _mean_valid(values, ok, what):
    n = ok.size
    failures = int(np.count_nonzero(~ok))
    if failures > MAX_FAILURE_FRACTION * n:
        raise NonInvertible(what, message=f"{failures} of {n} states have a singular {what}")
    return np.mean(values[ok], axis=0)


def plugin_information(model, grid, theta, inc=None):
    """Empirical information matrices at ``theta``.

    The stationary integrals are replaced by averages over the states
    ``Z_{t_{j-1}}``, j = 1..n. Returns a dict with keys ``gamma11``,
    ``gamma22``, ``gamma33`` and ``gamma1_initial`` (the X-only information
    of the initial theta1 estimator).
    """
    inc = inc or Increments(grid)
    Z = inc.z_prev
    th1, th2, th3 = theta.blocks()
    C = C_matrix(model, Z, th1)
    Cinv, _, okC = spd_inverse(C)
    Hx = model.H_x(Z, th3)
    Vinv, _, okV = spd_inverse(V_matrix(Hx, C))
    dC = model.C_theta(Z, th1)

    CdC = np.einsum("mij,mjkp->mikp", Cinv, dC)
    trC = np.einsum("mijp,mjiq->mpq", CdC, CdC)
    HdCH = np.einsum("mik,mklp,mjl->mijp", Hx, dC, Hx)
    VdV = np.einsum("mij,mjkp->mikp", Vinv, HdCH)
    trV = np.einsum("mijp,mjiq->mpq", VdV, VdV)
    dA = model.A_theta(Z, th2)
    dH = model.H_theta(Z, th3)

    g1 = _mean_valid(0.5 * trC, okC, "C")
    g11 = _mean_valid(0.5 * (trC + trV), okC & okV, "V")
    g22 = _mean_valid(np.einsum("mip,mij,mjq->mpq", dA, Cinv, dA), okC, "C")
    g33 = _mean_valid(12.0 * np.einsum("mip,mij,mjq->mpq", dH, Vinv, dH), okC & okV, "V")
    sym = lambda G: 0.5 * (G + G.T)
    return {"gamma11": sym(g11), "gamma22": sym(g22), "gamma33": sym(g33),
            "gamma1_initial": sym(g1)}


def identifiability_fields(model, grid, theta_star, theta, inc=None):
    """Empirical identifiability fields (Y1, Y2, Y3) at ``theta``.

    Each compares the model at ``theta`` with ``theta_star`` averaged over
    the observed states; all three vanish at ``theta = theta_star`` and are
    non-positive elsewhere.
    """
    inc = inc or Increments(grid)
    Z = inc.z_prev
    d_x = model.dims.d_x
    Cs = C_matrix(model, Z, theta_star.theta1)
    C1 = C_matrix(model, Z, theta.theta1)
    C1inv, logdet1, ok1 = spd_inverse(C1)
    _, logdets, oks = spd_inverse(Cs)
    tr = np.einsum("mij,mji->m", C1inv, Cs)
    y1 = -0.5 * _mean_valid(tr - d_x + logdet1 - logdets, ok1 & oks, "C")

    Csinv = spd_inverse(Cs)[0]
    dA = model.A(Z, theta.theta2) - model.A(Z, theta_star.theta2)
    y2 = -0.5 * _mean_valid(np.einsum("mi,mij,mj->m", dA, Csinv, dA), oks, "C")

    V = V_matrix(model.H_x(Z, theta.theta3), Cs)
    Vinv, _, okV = spd_inverse(V)
    dH = model.H(Z, theta.theta3) - model.H(Z, theta_star.theta3)
    y3 = -6.0 * _mean_valid(np.einsum("mi,mij,mj->m", dH, Vinv, dH), okV, "V")
    return float(y1), float(y2), float(y3)


@dataclass
class IdentifiabilityScan:
    rows: list
    chi: dict


def empirical_identifiability(model, grid, theta_star, points=21, half_width=None):
    """Scan each parameter coordinate across its box, others held at theta_star.

    Parameters
    ----------
    points : int
        Grid points per coordinate.
    half_width : float, optional
        Restrict each scan to ``theta_star +/- half_width * (upper - lower)``
        (clipped to the box). Defaults to the whole box.

    Returns
    -------
    IdentifiabilityScan
        ``rows`` holds dicts (field, block, coord, value, y); ``chi`` maps
        ``"Y{k}[i]"`` to the least-squares coefficient of ``y = -chi d^2``.
    """
    inc = Increments(grid)
    rows = []
    chi = {}
    for b, box in enumerate(model.boxes, start=1):
        for i in range(box.dim):
            lo, hi = box.lower[i], box.upper[i]
            if half_width is not None:
                c, w = theta_star.block(b)[i], half_width * (hi - lo)
                lo, hi = max(lo, c - w), min(hi, c + w)
            grid_vals = np.linspace(lo, hi, points)
            ys, ds = [], []
            for v in grid_vals:
                blk = theta_star.block(b).copy()
                blk[i] = v
                th = theta_star.replace(**{f"theta{b}": blk})
                y = identifiability_fields(model, grid, theta_star, th, inc)[b - 1]
                rows.append({"field": f"Y{b}", "block": b, "coord": i, "value": float(v), "y": y})
                ys.append(y)
                ds.append(v - theta_star.block(b)[i])
            d2 = np.asarray(ds) ** 2
            chi[f"Y{b}[{i}]"] = float(-np.sum(np.asarray(ys) * d2) / np.sum(d2 ** 2))
    return IdentifiabilityScan(rows, chi)
