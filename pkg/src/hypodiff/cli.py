"""Command-line interface: simulate, estimate, mc, fisher, identify."""

import argparse
import sys
from pathlib import Path

import numpy as np
import yaml

from . import io
from .contrasts import Contrast
from .estimators import METHODS, empirical_identifiability, estimate_all, plugin_information
from .linalg import NonInvertible
from .models import available_models, get_model
from .montecarlo import (McAborted, McConfig, QQ_COLUMNS, RAW_COLUMNS, qq_rows, raw_rows,
                         run_replications, schedule_from_rule, variance_ratio_experiment,
                         rate_slope, theoretical_slopes)
from .optimize import OptimFailed, OptimizerConfig
from .simulate import NumericalBlowup, SimConfig, simulate_path

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
COMMANDS = ("simulate", "estimate", "mc", "fisher", "identify")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _schedule(text):
    pts = []
    for item in str(text).split(","):
        try:
            n, h = item.split(":")
            pts.append([int(n), float(h)])
        except ValueError:
            raise argparse.ArgumentTypeError(f"schedule items look like n:h, got {item!r}") from None
    return pts


def build_parser():
    parser = _Parser(prog="hypodiff", description="Estimation for degenerate diffusions.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="YAML file with run settings; flags override it")
        p.add_argument("--seed", type=int, help="master random seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--model", help=f"model name ({', '.join(available_models())})")
        for i in (1, 2, 3):
            p.add_argument(f"--theta{i}", type=_floats, help=f"comma-separated theta{i}")
        p.add_argument("--grid-points", type=int, dest="multistart_grid_points_per_dim",
                       help="multistart points per dimension")
        p.add_argument("--max-newton-iters", type=int, dest="max_newton_iters")
        p.add_argument("--gradient-tol", type=float, dest="gradient_tol")
        return p

    p = common(sub.add_parser("simulate", help="simulate an observation grid"))
    p.add_argument("--n", type=int)
    p.add_argument("--h", type=float)
    p.add_argument("--substeps", type=int)
    p.add_argument("--burn-in", type=int, dest="burn_in")
    p.add_argument("--z0", type=_floats)

    p = common(sub.add_parser("estimate", help="estimate parameters from a grid CSV"))
    p.add_argument("--data", help="observation CSV")
    p.add_argument("--methods", type=lambda s: s.split(","), help=f"subset of {','.join(METHODS)}")
    p.add_argument("--trace", action="store_true", default=None,
                   help="also dump per-increment joint contrast terms at each estimate")

    p = common(sub.add_parser("mc", help="Monte Carlo replications"))
    p.add_argument("--replications", type=int)
    p.add_argument("--schedule", type=_schedule, help="n:h pairs, comma separated")
    p.add_argument("--ns", type=_ints, help="sample sizes for the rule h = c n^-alpha")
    p.add_argument("--alpha", type=float)
    p.add_argument("--c", type=float)
    p.add_argument("--estimators", type=lambda s: s.split(","))
    p.add_argument("--workers", type=int)
    p.add_argument("--substeps", type=int)
    p.add_argument("--burn-in", type=int, dest="burn_in")
    p.add_argument("--z0", type=_floats)

    p = common(sub.add_parser("fisher", help="plug-in information matrices"))
    p.add_argument("--data", help="observation CSV")

    p = common(sub.add_parser("identify", help="identifiability field scans"))
    p.add_argument("--data", help="observation CSV")
    p.add_argument("--points", type=int)
    p.add_argument("--half-width", type=float, dest="half_width")
    return parser


SECTION_KEYS = {
    "simulate": ("n", "h", "substeps", "burn_in", "z0"),
    "estimate": ("data", "methods", "trace"),
    "mc": ("replications", "schedule", "ns", "alpha", "c", "estimators", "workers",
           "substeps", "burn_in", "z0"),
    "fisher": ("data",),
    "identify": ("data", "points", "half_width"),
}
OPTIMIZER_KEYS = ("multistart_grid_points_per_dim", "max_newton_iters", "gradient_tol")


def load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a mapping")
    return cfg


def resolve(args):
    """Merge file settings with flags; flags win."""
    cfg = load_config(args.config)
    section = dict(cfg.get(args.command) or {})
    for key in SECTION_KEYS[args.command]:
        v = getattr(args, key, None)
        if v is not None:
            section[key] = v
    opt = dict(cfg.get("optimizer") or {})
    for key in OPTIMIZER_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            opt[key] = v
    theta = dict(cfg.get("theta") or {})
    for i in (1, 2, 3):
        v = getattr(args, f"theta{i}")
        if v is not None:
            theta[f"theta{i}"] = v
    return {
        "model": args.model or cfg.get("model", "oscillator"),
        "seed": args.seed if args.seed is not None else int(cfg.get("seed", 0)),
        "out": args.out or cfg.get("out", "."),
        "theta": theta,
        "optimizer": opt,
        "section": section,
        "base_dir": Path(args.config).parent if args.config else Path("."),
    }


def _model(run):
    try:
        return get_model(run["model"])
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None


def _theta(model, run):
    base = model.default_theta
    given = run["theta"]
    unknown = set(given) - {"theta1", "theta2", "theta3"}
    if unknown:
        raise UsageError(f"unknown theta keys {sorted(unknown)}")
    try:
        theta = base.replace(**{k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in given.items()})
    except ValueError as exc:
        raise UsageError(f"bad theta: {exc}") from None
    for i, (p, t) in enumerate(zip(model.dims.block_sizes(), theta.blocks()), start=1):
        if t.size != p:
            raise UsageError(f"theta{i} needs {p} values for model {run['model']}, got {t.size}")
    return theta


def _optimizer(run):
    try:
        return OptimizerConfig(**run["optimizer"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad optimizer settings: {exc}") from None


def _out_dir(run):
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data(model, run):
    path = run["section"].get("data")
    if path is None:
        raise UsageError("--data is required")
    p = Path(path)
    if not p.is_absolute() and not p.exists():
        p = run["base_dir"] / p
    if not p.is_file():
        raise UsageError(f"data file not found: {path}")
    try:
        return io.load_observations(p, model.dims)
    except (io.FormatError, io.NonEquidistant) as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_simulate(run):
    model = _model(run)
    theta = _theta(model, run)
    s = run["section"]
    if "n" not in s or "h" not in s:
        raise UsageError("simulate needs n and h")
    try:
        sim = SimConfig(n=int(s["n"]), h=float(s["h"]), z0=tuple(s.get("z0") or (0.0,) * model.dims.d_z),
                        seed=run["seed"], substeps=int(s.get("substeps", 20)), burn_in=s.get("burn_in"))
        grid = simulate_path(model, theta, sim)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    path = io.write_observations(_out_dir(run) / "observations.csv", grid)
    return [path]


def cmd_estimate(run):
    model = _model(run)
    grid = _data(model, run)
    methods = tuple(run["section"].get("methods") or ("adaptive",))
    bad = set(methods) - set(METHODS)
    if bad:
        raise UsageError(f"unknown methods {sorted(bad)}; choose from {', '.join(METHODS)}")
    try:
        reports = estimate_all(model, grid, _optimizer(run), methods)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(run)
    paths = []
    for m in methods:
        d = {"model": run["model"], **reports[m].to_dict()}
        paths.append(io.write_json(out / f"estimate_{m}.json", d))
        if run["section"].get("trace"):
            joint = Contrast(model, grid, "joint")
            paths.append(io.write_contrast_trace(out / f"trace_{m}.csv", joint, reports[m].theta_hat.vector()))
    return paths


def _mc_config(model, run):
    s = run["section"]
    if s.get("schedule"):
        sched = [tuple(p) for p in s["schedule"]]
    elif s.get("ns"):
        if "alpha" not in s:
            raise UsageError("a schedule rule needs alpha")
        try:
            sched = schedule_from_rule(s["ns"], float(s["alpha"]), s.get("c"))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        raise UsageError("mc needs a schedule (n:h pairs) or ns with alpha")
    try:
        return McConfig(model=run["model"], theta_star=_theta(model, run),
                        replications=int(s.get("replications", 100)), schedule=sched,
                        estimators=tuple(s.get("estimators") or ("adaptive",)),
                        master_seed=run["seed"], workers=s.get("workers"),
                        z0=None if s.get("z0") is None else tuple(s["z0"]),
                        substeps=int(s.get("substeps", 20)), burn_in=s.get("burn_in"),
                        optimizer=_optimizer(run))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_mc(run):
    model = _model(run)
    cfg = _mc_config(model, run)
    summary = run_replications(cfg)
    doc = summary.to_dict()
    if len(cfg.schedule) >= 3 and "adaptive" in cfg.estimators:
        doc["rate_slopes"] = {"trimmed": rate_slope(summary), "raw": rate_slope(summary, trimmed=False)}
        alpha = run["section"].get("alpha")
        if alpha is not None:
            doc["rate_slopes"]["theoretical"] = theoretical_slopes(float(alpha))
    if "adaptive" in cfg.estimators and cfg.replications >= 2:
        doc["variance_ratios"] = [variance_ratio_experiment(summary, k) for k in range(len(cfg.schedule))]
    out = _out_dir(run)
    return [io.write_json(out / "mc_summary.json", doc),
            io.write_table(out / "mc_raw.csv", RAW_COLUMNS, raw_rows(summary.records, cfg)),
            io.write_table(out / "mc_qq.csv", QQ_COLUMNS, qq_rows(summary))]


def cmd_fisher(run):
    model = _model(run)
    grid = _data(model, run)
    if run["theta"]:
        theta, source = _theta(model, run), "given"
    else:
        theta, source = estimate_all(model, grid, _optimizer(run), ("adaptive",))["adaptive"].theta_hat, "adaptive"
    gam = plugin_information(model, grid, theta)
    doc = {"model": run["model"], "n": grid.n, "h": grid.h, "theta_source": source,
           "theta": theta.to_dict(), **{k: np.asarray(v).tolist() for k, v in gam.items()}}
    return [io.write_json(_out_dir(run) / "fisher.json", doc)]


def cmd_identify(run):
    model = _model(run)
    grid = _data(model, run)
    theta = _theta(model, run)
    s = run["section"]
    scan = empirical_identifiability(model, grid, theta, points=int(s.get("points", 21)),
                                     half_width=s.get("half_width"))
    out = _out_dir(run)
    rows = [(r["field"], r["block"], r["coord"], r["value"], r["y"]) for r in scan.rows]
    return [io.write_table(out / "identify.csv", ("field", "block", "coord", "value", "y"), rows),
            io.write_json(out / "identify_chi.json", {"model": run["model"], "theta_star": theta.to_dict(),
                                                      "chi": scan.chi})]


HANDLERS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "mc": cmd_mc,
            "fisher": cmd_fisher, "identify": cmd_identify}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        run = resolve(args)
        paths = HANDLERS[args.command](run)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (OptimFailed, NonInvertible, NumericalBlowup, McAborted, FloatingPointError) as exc:
        stage = getattr(exc, "stage", None)
        tag = f"[{stage}] " if stage and not str(exc).startswith("[") else ""
        print(f"numerical failure: {tag}{exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
