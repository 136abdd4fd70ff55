"""Reading and writing observation grids, reports and tables."""

import csv
import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

from .model import Dimensions
from .simulate import ObservationGrid

SPACING_RTOL = 1e-9


class FormatError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class NonEquidistant(ValueError):
    def __init__(self, index, spacing, h):
        self.index = index
        super().__init__(f"time spacing {spacing!r} at index {index} deviates from h={h!r} "
                         f"beyond relative tolerance {SPACING_RTOL:g}")


def fmt(v):
    """17 significant digits for floats, plain text otherwise."""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_table(path, columns, rows):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def grid_header(d_x, d_y):
    return ["t"] + [f"x{i + 1}" for i in range(d_x)] + [f"y{i + 1}" for i in range(d_y)]


def write_observations(path, grid):
    """CSV with header ``t,x1..,y1..``; one row per observation."""
    t = grid.t
    rows = ([t[j], *grid.z[j]] for j in range(grid.n + 1))
    return write_table(path, grid_header(grid.dims.d_x, grid.dims.d_y), rows)


def _parse_header(header):
    if not header or header[0].strip() != "t":
        raise FormatError("header must start with 't'", 1)
    names = [c.strip() for c in header[1:]]
    xs = [c for c in names if c.startswith("x")]
    ys = [c for c in names if c.startswith("y")]
    expected = grid_header(len(xs), len(ys))[1:]
    if not xs or not ys or names != expected:
        raise FormatError(f"expected columns {','.join(['t'] + expected)}, got {','.join(header)}", 1)
    return len(xs), len(ys)


def load_observations(path, dims=None):
    """Parse a grid CSV written by :func:`write_observations`.

    ``h`` is inferred from the time column, which must be strictly
    increasing with spacing equal to ``(t_n - t_0) / n`` to relative 1e-9.
    Without ``dims`` only ``d_x`` and ``d_y`` are taken from the header.

    Raises
    ------
    FormatError
        Malformed header, wrong field count or unparseable number (with line).
    NonEquidistant
        Irregular time spacing, with the offending increment index.
    """
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty file", 1) from None
        d_x, d_y = _parse_header(header)
        width = 1 + d_x + d_y
        data = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise FormatError(f"expected {width} fields, got {len(row)}", line)
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise FormatError(str(exc), line) from None
            if not all(math.isfinite(v) for v in vals):
                raise FormatError("non-finite value", line)
            data.append(vals)
    if len(data) < 3:
        raise FormatError(f"need at least 3 observation rows, got {len(data)}")
    arr = np.array(data)
    t = arr[:, 0]
    n = len(t) - 1
    h = (t[-1] - t[0]) / n
    if not h > 0:
        raise NonEquidistant(0, float(t[1] - t[0]), float(h))
    dt = np.diff(t)
    bad = np.flatnonzero(np.abs(dt - h) > SPACING_RTOL * h)
    if bad.size:
        k = int(bad[0])
        raise NonEquidistant(k, float(dt[k]), float(h))
    if dims is None:
        dims = Dimensions(d_x=d_x, d_y=d_y, r=d_x, p1=1, p2=1, p3=1)
    elif (dims.d_x, dims.d_y) != (d_x, d_y):
        raise FormatError(f"file has d_x={d_x}, d_y={d_y} but the model expects "
                          f"d_x={dims.d_x}, d_y={dims.d_y}", 1)
    return ObservationGrid(float(h), arr[:, 1:], dims)


def write_contrast_trace(path, contrast, params):
    """Per-increment contrast contributions as ``j,value`` rows (j from 1)."""
    terms = contrast.terms(params)
    return write_table(path, ("j", "value"), ((j + 1, float(v)) for j, v in enumerate(terms)))


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def to_json_text(obj):
    """Deterministic JSON; floats use the shortest exact round-trip form and NaN becomes null."""
    return json.dumps(_clean(obj), indent=2, allow_nan=False) + "\n"


def write_json(path, obj):
    path = Path(path)
    path.write_text(to_json_text(obj))
    return path


SCHEMAS = ("estimate_report", "fisher", "mc_summary", "identify_chi")


def load_schema(name):
    """JSON schema shipped with the package for one of :data:`SCHEMAS`."""
    if name not in SCHEMAS:
        raise KeyError(f"unknown schema {name!r}; available: {', '.join(SCHEMAS)}")
    text = resources.files("hypodiff").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)
