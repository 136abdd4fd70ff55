"""Replication harness for rate-scaled error distributions."""

import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .estimators import METHODS, estimate_all, rate_scales
from .linalg import NonInvertible
from .model import ThetaPoint
from .models import get_model
from .optimize import OptimFailed, OptimizerConfig
from .simulate import SimConfig, ObservationGrid, simulate_paths

WORKERS_ENV = "HYPODIFF_WORKERS"
MAX_FAILED_FRACTION = 0.2
TRIM = 0.02
BOOTSTRAP_RESAMPLES = 1000
BATCH = 25
RAW_COLUMNS = ("rep", "n", "h", "estimator", "block", "coord", "error", "scaled_error", "ok_flag")


class McAborted(RuntimeError):
    pass


def default_workers():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        w = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, w)


def schedule_from_rule(ns, alpha, c=None, target_nh=50.0):
    """``h = c n^{-alpha}``; by default ``c`` puts ``n h`` at ``target_nh`` for the smallest ``n``."""
    if not 0.5 < alpha < 1.0:
        raise ValueError("alpha must lie in (0.5, 1)")
    ns = sorted(int(n) for n in ns)
    if c is None:
        c = target_nh / ns[0] ** (1.0 - alpha)
    return [(n, float(c * n ** (-alpha))) for n in ns]


@dataclass(frozen=True)
class McConfig:
    model: str
    theta_star: ThetaPoint
    replications: int
    schedule: tuple
    estimators: tuple = ("adaptive",)
    master_seed: int = 0
    workers: int = None
    z0: tuple = None
    substeps: int = 20
    burn_in: int = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    model_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        sched = tuple((int(n), float(h)) for n, h in self.schedule)
        if not sched:
            raise ValueError("schedule is empty")
        object.__setattr__(self, "schedule", sched)
        est = tuple(self.estimators)
        bad = set(est) - set(METHODS)
        if bad or not est:
            raise ValueError(f"estimators must be a non-empty subset of {METHODS}")
        object.__setattr__(self, "estimators", est)
        if self.workers is None:
            object.__setattr__(self, "workers", default_workers())
        for n, h in sched:
            if h <= 0 or n < 2:
                raise ValueError(f"invalid schedule point (n={n}, h={h})")
            if n * h < 10 or n * h * h > 1:
                warnings.warn(f"schedule point n={n}, h={h:g} has nh={n * h:.3g}, nh^2={n * h * h:.3g} "
                              "outside nh >= 10, nh^2 <= 1", stacklevel=3)

    def build_model(self):
        return get_model(self.model, **self.model_options)

    def start_state(self, model):
        return tuple(self.z0) if self.z0 is not None else (0.0,) * model.dims.d_z

    def to_dict(self):
        return {"model": self.model, "theta_star": self.theta_star.to_dict(),
                "replications": self.replications, "schedule": [list(p) for p in self.schedule],
                "estimators": list(self.estimators), "master_seed": self.master_seed,
                "substeps": self.substeps, "burn_in": self.burn_in,
                "z0": None if self.z0 is None else list(self.z0)}


@dataclass
class ReplicationRecord:
    rep: int
    n: int
    h: float
    ok: bool
    error: str = None
    estimates: dict = field(default_factory=dict)   # method -> (theta, stderr, initial, event_ok)


def _replication_seed(master, rep):
    return int(master) ^ int(rep)


def _run_batch(args):
    cfg, n, h, reps = args
    model = cfg.build_model()
    sim = SimConfig(n=n, h=h, z0=cfg.start_state(model), seed=cfg.master_seed,
                    substeps=cfg.substeps, burn_in=cfg.burn_in)
    seeds = [_replication_seed(cfg.master_seed, r) for r in reps]
    paths, blowup = simulate_paths(model, cfg.theta_star, sim, seeds)
    out = []
    for k, r in enumerate(reps):
        if blowup[k] >= 0:
            out.append(ReplicationRecord(r, n, h, False, f"blow-up at step {blowup[k]}"))
            continue
        grid = ObservationGrid(h, paths[k], model.dims)
        try:
            reports = estimate_all(model, grid, cfg.optimizer, cfg.estimators)
        except (OptimFailed, NonInvertible, FloatingPointError) as exc:
            out.append(ReplicationRecord(r, n, h, False, str(exc)))
            continue
        est = {m: (rep.theta_hat, rep.stderr, rep.initial, bool(rep.onestep_event_ok))
               for m, rep in reports.items()}
        out.append(ReplicationRecord(r, n, h, True, estimates=est))
    return out


def _batches(cfg, n, h):
    reps = list(range(cfg.replications))
    return [(cfg, n, h, reps[i:i + BATCH]) for i in range(0, len(reps), BATCH)]


def simulate_and_estimate(cfg):
    """Run every replication at every schedule point; records ordered by (point, rep)."""
    jobs = [job for n, h in cfg.schedule for job in _batches(cfg, n, h)]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(_run_batch, jobs))
    else:
        chunks = [_run_batch(job) for job in jobs]
    records = {}
    for chunk in chunks:
        for rec in chunk:
            records[(rec.n, rec.h, rec.rep)] = rec
    ordered = []
    for n, h in cfg.schedule:
        point = [records[(n, h, r)] for r in range(cfg.replications)]
        failed = sum(not rec.ok for rec in point)
        if failed > MAX_FAILED_FRACTION * cfg.replications:
            first = next(rec.error for rec in point if not rec.ok)
            raise McAborted(f"{failed} of {cfg.replications} replications failed at n={n}, h={h:g}; "
                            f"first failure: {first}")
        ordered.extend(point)
    return ordered


def _errors(records, cfg, method, block, theta_star, which="theta"):
    """(error, stderr) arrays over replications, NaN where the replication failed."""
    p = theta_star.block(block).size
    err = np.full((len(records), p), np.nan)
    se = np.full((len(records), p), np.nan)
    for i, rec in enumerate(records):
        if not rec.ok:
            continue
        theta, stderr, initial, _ = rec.estimates[method]
        est = initial if which == "initial" else theta
        err[i] = est.block(block) - theta_star.block(block)
        se[i] = stderr.block(block)
    return err, se


def raw_rows(records, cfg):
    """Per-replication rows in :data:`RAW_COLUMNS` order."""
    rows = []
    for rec in records:
        scales = rate_scales(rec.n, rec.h)
        for m in cfg.estimators:
            for b in (1, 2, 3):
                star = cfg.theta_star.block(b)
                if rec.ok:
                    est = rec.estimates[m][0].block(b)
                for c in range(star.size):
                    if rec.ok:
                        e = float(est[c] - star[c])
                        rows.append((rec.rep, rec.n, rec.h, m, b, c, e, e * scales[b - 1], 1))
                    else:
                        rows.append((rec.rep, rec.n, rec.h, m, b, c, np.nan, np.nan, 0))
    return rows


def _coord_summary(err, se, scale):
    ok = np.isfinite(err)
    e = err[ok]
    s = scale * e
    m = e.size
    out = {"succeeded": int(m)}
    if m == 0:
        return out
    rmse = float(np.sqrt(np.mean(e ** 2)))
    out.update(
        mean_error=float(np.mean(e)),
        scaled_mean=float(np.mean(s)),
        scaled_variance=float(np.var(s, ddof=1)) if m > 1 else 0.0,
        scaled_mean_se=float(np.std(s, ddof=1) / np.sqrt(m)) if m > 1 else float("nan"),
        target_variance=float(np.nanmean((scale * se[ok]) ** 2)),
        coverage=float(np.mean(np.abs(e) <= stats.norm.ppf(0.975) * se[ok])),
        rmse=rmse,
        rmse_trimmed=float(np.sqrt(stats.trim_mean(e ** 2, TRIM))),
    )
    return out


def _at_point(records, n, h):
    """Records of one schedule point in replication order, whatever order they arrived in."""
    return sorted((r for r in records if r.n == n and r.h == h), key=lambda r: r.rep)


@dataclass
class McSummary:
    config: McConfig
    points: list
    records: list

    def coord(self, n, h, method, block, coord=0):
        for pt in self.points:
            if pt["n"] == n and pt["h"] == h:
                return pt["estimators"][method][f"theta{block}"][coord]
        raise KeyError((n, h))

    def scaled_errors(self, method, block, coord=0, point=0, which="theta"):
        n, h = self.config.schedule[point]
        recs = _at_point(self.records, n, h)
        err, _ = _errors(recs, self.config, method, block, self.config.theta_star, which)
        return err[:, coord] * rate_scales(n, h)[block - 1]

    def to_dict(self):
        return {"config": self.config.to_dict(), "points": self.points}


def summarize(records, cfg):
    points = []
    for n, h in cfg.schedule:
        recs = _at_point(records, n, h)
        scales = rate_scales(n, h)
        failed = sum(not r.ok for r in recs)
        pt = {"n": n, "h": h, "replications": len(recs), "succeeded": len(recs) - failed,
              "failed": failed, "failures": [r.error for r in recs if not r.ok], "estimators": {}}
        for m in cfg.estimators:
            est = {"onestep_event_failures": sum(1 for r in recs if r.ok and not r.estimates[m][3])}
            for b in (1, 2, 3):
                err, se = _errors(recs, cfg, m, b, cfg.theta_star)
                est[f"theta{b}"] = [_coord_summary(err[:, c], se[:, c], scales[b - 1])
                                    for c in range(err.shape[1])]
            pt["estimators"][m] = est
        points.append(pt)
    return points


def run_replications(cfg):
    """Simulate, estimate and summarise.

    Returns
    -------
    McSummary
        Per-point statistics plus the replication records; the raw table is
        available through :func:`raw_rows`.

    Raises
    ------
    McAborted
        If more than 20% of the replications at some schedule point fail.
    """
    records = simulate_and_estimate(cfg)
    return McSummary(cfg, summarize(records, cfg), records)


def qq_rows(summary):
    """Sorted rate-scaled errors against standard normal quantiles."""
    rows = []
    cfg = summary.config
    for k, (n, h) in enumerate(cfg.schedule):
        for m in cfg.estimators:
            for b in (1, 2, 3):
                for c in range(cfg.theta_star.block(b).size):
                    s = summary.scaled_errors(m, b, c, k)
                    s = np.sort(s[np.isfinite(s)])
                    if s.size == 0:
                        continue
                    q = stats.norm.ppf((np.arange(1, s.size + 1) - 0.5) / s.size)
                    sd = np.std(s, ddof=1) if s.size > 1 else 1.0
                    for i in range(s.size):
                        rows.append((n, h, m, b, c, i + 1, float(q[i]), float(s[i]), float(s[i] / sd)))
    return rows


QQ_COLUMNS = ("n", "h", "estimator", "block", "coord", "rank", "normal_quantile", "scaled_error",
              "standardized")


def rate_slope(summary, method="adaptive", trimmed=True):
    """OLS slope of log RMSE against log n, per block and coordinate.

    Returns a dict ``theta{b} -> list of slopes`` (one per coordinate).
    """
    cfg = summary.config
    if len(cfg.schedule) < 3:
        raise ValueError("rate slopes need at least three schedule points")
    logn = np.log([n for n, _ in cfg.schedule])
    key = "rmse_trimmed" if trimmed else "rmse"
    out = {}
    for b in (1, 2, 3):
        slopes = []
        for c in range(cfg.theta_star.block(b).size):
            r = [summary.coord(n, h, method, b, c)[key] for n, h in cfg.schedule]
            slopes.append(float(np.polyfit(logn, np.log(r), 1)[0]))
        out[f"theta{b}"] = slopes
    return out


def theoretical_slopes(alpha):
    return {"theta1": -0.5, "theta2": -(1 - alpha) / 2, "theta3": -(1 + alpha) / 2}


def variance_ratio(num, den, resamples=BOOTSTRAP_RESAMPLES, seed=0, level=0.95):
    """``Var(num) / Var(den)`` over paired replications with a percentile bootstrap interval."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    ok = np.isfinite(num) & np.isfinite(den)
    num, den = num[ok], den[ok]
    if num.size < 2:
        raise ValueError("need at least two paired replications")
    ratio = float(np.var(num, ddof=1) / np.var(den, ddof=1))
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, num.size, size=(resamples, num.size))
    with np.errstate(divide="ignore", invalid="ignore"):
        boot = np.var(num[idx], axis=1, ddof=1) / np.var(den[idx], axis=1, ddof=1)
    boot = boot[np.isfinite(boot)]
    tail = 50 * (1 - level)
    lo, hi = np.percentile(boot, [tail, 100 - tail]) if boot.size else (np.nan, np.nan)
    return {"ratio": ratio, "lower": float(lo), "upper": float(hi), "replications": int(num.size)}


def variance_ratio_experiment(summary, point=0):
    """Efficiency ratios: Y-only vs adaptive for theta3, one-step vs initial for theta1."""
    cfg = summary.config
    seed = cfg.master_seed
    out = {}
    if {"adaptive", "inferior_theta3"} <= set(cfg.estimators):
        p3 = cfg.theta_star.theta3.size
        out["theta3_inferior_over_adaptive"] = [
            variance_ratio(summary.scaled_errors("inferior_theta3", 3, c, point),
                           summary.scaled_errors("adaptive", 3, c, point), seed=seed)
            for c in range(p3)]
    if "adaptive" in cfg.estimators:
        p1 = cfg.theta_star.theta1.size
        out["theta1_onestep_over_initial"] = [
            variance_ratio(summary.scaled_errors("adaptive", 1, c, point),
                           summary.scaled_errors("adaptive", 1, c, point, which="initial"), seed=seed)
            for c in range(p1)]
    if not out:
        raise ValueError("estimator set lacks the compared pairs")
    return out
