"""Command-line front end: ``simulate``, ``fit``, ``predict``, ``cv`` and ``evaluate``.

Exit codes: 0 success, 1 usage, 2 data (input files, formats), 3 numerical
failure. Primary outputs are staged next to their targets and renamed into
place only once every output of the command has been written.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import re
import sys
import tempfile
from pathlib import Path

import numpy as np

from .basis import BasisSpec
from .estimation import (AecmConfig, EmConfig, EstimationError, aecm_fit, em_fit,
                         initial_params)
from .geometry import KnotLayout, Metric, place_knots, read_knots
from .model import FitResult, Dataset
from .prediction import Kriger, PredictionRequest, prediction_interval
from .simulation import (DESIGNS, K_TYPES, SimDesign, StudyConfig, design_grid,
                         lattice_layout, replicate_rng, run_study, sample_K,
                         simulate_field)

log = logging.getLogger("smefrk")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Atomic output
# ---------------------------------------------------------------------------

class StagedOutputs:
    """Collect outputs as temp files; publish them together on success."""

    def __init__(self):
        self._staged: list[tuple[str, Path]] = []

    def write(self, target, text: str) -> Path:
        target = Path(target)
        parent = target.parent if str(target.parent) else Path(".")
        if not parent.is_dir():
            raise DataError(f"output directory {parent} does not exist")
        fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=parent)
        self._staged.append((tmp, target))
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        return target

    def discard(self) -> None:
        for tmp, _ in self._staged:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
        self._staged.clear()

    def commit(self) -> None:
        for tmp, target in self._staged:
            os.replace(tmp, target)
        self._staged.clear()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.commit()
        else:
            self.discard()
        return False


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


# ---------------------------------------------------------------------------
# Input parsing
# ---------------------------------------------------------------------------

def read_numeric_csv(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Header names (lower case), a float array and each row's line number."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows, lines = [], []
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, "
                                f"found {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite(vals)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
            lines.append(lineno)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return header, np.array(rows), np.array(lines)


def _columns(path, header, allowed_extra):
    """Indices of ``coordN`` and ``xN`` columns plus any named extras."""
    coords = sorted((int(h[5:]), i) for i, h in enumerate(header)
                    if re.fullmatch(r"coord[12]", h))
    xs = sorted((int(h[1:]), i) for i, h in enumerate(header) if re.fullmatch(r"x\d+", h))
    extra = {h: i for i, h in enumerate(header) if h in allowed_extra}
    known = {i for _, i in coords} | {i for _, i in xs} | set(extra.values())
    unknown = [h for i, h in enumerate(header) if i not in known]
    if unknown:
        raise DataError(f"{path}:1: unknown column(s) {', '.join(unknown)}")
    if [k for k, _ in coords] not in ([1], [1, 2]):
        raise DataError(f"{path}:1: expected coord1 or coord1,coord2 columns")
    if [k for k, _ in xs] != list(range(1, len(xs) + 1)):
        raise DataError(f"{path}:1: covariate columns must be x1..xp")
    if not xs:
        raise DataError(f"{path}:1: at least one covariate column x1 required")
    if len(set(header)) != len(header):
        raise DataError(f"{path}:1: duplicate column names")
    return [i for _, i in coords], [i for _, i in xs], extra


def read_observations(path) -> Dataset:
    """Observations CSV ``coord1[,coord2],x1..xp,y[,vdelta,veps]``."""
    header, arr, lines = read_numeric_csv(path)
    ci, xi, extra = _columns(path, header, ("y", "vdelta", "veps"))
    if "y" not in extra:
        raise DataError(f"{path}:1: missing response column y")
    for w in ("vdelta", "veps"):
        if w in extra:
            bad = np.nonzero(arr[:, extra[w]] <= 0)[0]
            if len(bad):
                raise DataError(f"{path}:{lines[bad[0]]}: {w} must be positive")
    get = lambda k: arr[:, extra[k]] if k in extra else None  # noqa: E731
    try:
        return Dataset(arr[:, ci], arr[:, xi], arr[:, extra["y"]],
                       get("vdelta"), get("veps"))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def read_targets(path):
    """Targets CSV ``coord1[,coord2],x1..xp[,vdelta]``."""
    header, arr, lines = read_numeric_csv(path)
    ci, xi, extra = _columns(path, header, ("vdelta",))
    vd = arr[:, extra["vdelta"]] if "vdelta" in extra else None
    if vd is not None and np.any(vd <= 0):
        raise DataError(f"{path}:{lines[np.argmax(vd <= 0)]}: vdelta must be positive")
    return arr[:, ci], arr[:, xi], vd


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad {what} {text!r}") from None


def parse_knot_grid(spec: str) -> KnotLayout:
    """``LO,HI:C1[,C2...][:discrete]`` (1-D) or ``XLO,XHI,YLO,YHI:C1[,C2...]``
    (2-D triangular). A 2-D count may be an explicit shape ``NXxNY``."""
    parts = spec.split(":")
    if len(parts) < 2:
        raise ValueError(f"knot grid {spec!r}: expected BOUNDS:COUNTS")
    bounds = [float(v) for v in parts[0].split(",")]
    flags = {p.strip().lower() for p in parts[2:]}
    if flags - {"discrete"}:
        raise ValueError(f"knot grid {spec!r}: unknown option(s) {flags - {'discrete'}}")
    counts = []
    for c in parts[1].split(","):
        c = c.strip().lower()
        if "x" in c:
            nx, ny = c.split("x")
            counts.append((int(nx), int(ny)))
        else:
            counts.append(int(c))
    if len(bounds) == 2:
        if any(isinstance(c, tuple) for c in counts):
            raise ValueError("lattice shapes apply to 2-D grids only")
        return place_knots(bounds, counts, "regular_1d", discrete="discrete" in flags)
    if len(bounds) == 4:
        if flags:
            raise ValueError("'discrete' applies to 1-D grids only")
        return place_knots((bounds[:2], bounds[2:]), counts, "regular_triangular_2d")
    raise ValueError(f"knot grid {spec!r}: bounds need 2 or 4 numbers")


def grid_targets(spec: str) -> np.ndarray:
    """Regular targets from ``LO,HI,STEP`` or ``XLO,XHI,YLO,YHI,STEP[,YSTEP]``."""
    v = [float(x) for x in spec.split(",")]

    def axis(lo, hi, step):
        if not (step > 0 and hi >= lo):
            raise ValueError(f"grid {spec!r}: need LO <= HI and STEP > 0")
        count = int(np.floor((hi - lo) / step + 1e-9)) + 1
        return lo + step * np.arange(count)

    if len(v) == 3:
        return axis(*v)[:, None]
    if len(v) in (5, 6):
        xs = axis(v[0], v[1], v[4])
        ys = axis(v[2], v[3], v[5] if len(v) == 6 else v[4])
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])
    raise ValueError(f"grid {spec!r}: expected 3, 5 or 6 numbers")


def load_config(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


# ---------------------------------------------------------------------------
# Argument parser
# ---------------------------------------------------------------------------

def _metric(text):
    try:
        return Metric.parse(text)
    except (ValueError, KeyError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _pair(text):
    v = _floats(text, "pair")
    if len(v) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return tuple(v)


def _float_list(text):
    return tuple(_floats(text, "list"))


def _str_list(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _common(p):
    g = p.add_argument_group("general")
    g.add_argument("--config", help="flat key = value file; flags override it")
    g.add_argument("--dump-config", action="store_true",
                   help="print the effective settings and exit")
    g.add_argument("--seed", type=int, default=2020)
    g.add_argument("--threads", type=int, default=1)
    g.add_argument("--verbose", "-v", action="store_true")


def _knot_opts(p):
    g = p.add_argument_group("basis")
    g.add_argument("--knots", help="knot CSV with columns res,coord1[,coord2]")
    g.add_argument("--knot-grid", metavar="SPEC",
                   help="LO,HI:C1[,C2..][:discrete] or XLO,XHI,YLO,YHI:C1[,C2..]")
    g.add_argument("--resolutions", type=int, metavar="L",
                   help="keep the first L resolutions")
    g.add_argument("--metric", type=_metric, default=Metric(),
                   help="euclidean or greatcircle[:RADIUS|km|mi]")


def _tuning_opts(p):
    g = p.add_argument_group("estimation")
    g.add_argument("--max-iter", type=int, default=EmConfig.max_iter)
    g.add_argument("--tol", type=float, default=EmConfig.tol_loglik,
                   help="relative log-likelihood change for convergence")
    g.add_argument("--weak-tol", type=float, default=EmConfig.weak_tol)
    g.add_argument("--b-bracket", type=_pair, default=AecmConfig.b_bracket,
                   metavar="LO,HI")
    g.add_argument("--golden-iters", type=int, default=AecmConfig.golden_iters)
    g.add_argument("--quad-tol", type=float, default=AecmConfig.quad_tol)
    g.add_argument("--inner-max-iter", type=int, default=AecmConfig.inner_max_iter)
    g.add_argument("--max-cycles", type=int, default=AecmConfig.max_cycles)
    g.add_argument("--initial-b", type=float, default=1.5,
                   help="starting (em: fixed) b when --b is not given")


def _fit_opts(p):
    g = p.add_argument_group("model")
    g.add_argument("--data", help="observations CSV")
    g.add_argument("--method", choices=("em", "aecm"), default="aecm")
    g.add_argument("--sigma-eps2", type=float,
                   help="known measurement-error variance (required)")
    g.add_argument("--b", type=float, help="fixed bandwidth constant")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smefrk", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("simulate", help="draw synthetic 1-D fields")
    _common(p)
    _knot_opts(p)
    p.add_argument("--K-type", dest="K_type", choices=K_TYPES, default="matern")
    p.add_argument("--sigma-delta2", type=float, default=0.1)
    p.add_argument("--sigma-eps2", type=float, default=1.0)
    p.add_argument("--b", type=float, default=1.5, help="true bandwidth constant")
    p.add_argument("--design", choices=DESIGNS, default="random")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--prefix", default="sim")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("fit", help="estimate K, sigma_delta2 (and b)")
    _common(p)
    _knot_opts(p)
    _fit_opts(p)
    _tuning_opts(p)
    p.add_argument("--out", default="fit.json")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("predict", help="krige from a saved fit")
    _common(p)
    p.add_argument("--fit", help="fit file written by 'fit'")
    p.add_argument("--targets", help="CSV coord1[,coord2],x1..xp[,vdelta]")
    p.add_argument("--grid", help="LO,HI,STEP or XLO,XHI,YLO,YHI,STEP[,YSTEP]")
    p.add_argument("--grid-covariates", choices=("auto", "intercept", "coords"),
                   default="auto", help="design matrix for --grid targets")
    p.add_argument("--snap", type=float, default=0.0,
                   help="treat targets within this distance of a datum as observed")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--decompose", type=_bool, default=True,
                   help="add mean and spatial columns")
    p.add_argument("--batch-size", type=int, default=4096)
    p.add_argument("--out", default="predictions.csv")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("cv", help="k-fold cross-validated MSPE")
    _common(p)
    _knot_opts(p)
    _fit_opts(p)
    _tuning_opts(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out", default="cv.csv")
    p.set_defaults(handler=cmd_cv)

    p = sub.add_parser("evaluate", help="Monte Carlo study over a design grid")
    _common(p)
    _tuning_opts(p)
    p.add_argument("--K-types", dest="K_types", type=_str_list, default=("matern",))
    p.add_argument("--b-values", type=_float_list, default=(0.5, 1.0, 1.5, 2.0))
    p.add_argument("--sigma-delta2-values", type=_float_list, default=(0.01, 0.1, 1.0))
    p.add_argument("--sigma-eps2-values", type=_float_list, default=(1.0,))
    p.add_argument("--designs", type=_str_list, default=DESIGNS)
    p.add_argument("--replicates", type=int, default=200)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--mspe-sites", choices=("unobserved", "all"), default="unobserved")
    p.add_argument("--coverage-sites", choices=("all", "unobserved"), default="all",
                   help="sites scored by PIC and rKSE")
    p.add_argument("--by", type=_str_list,
                   default=("K_type", "sigma_eps2", "b", "sigma_delta2", "design"),
                   help="grouping columns; K_type,sigma_eps2,b pools cells")
    p.add_argument("--rows-out", help="optional per-replicate CSV")
    p.add_argument("--out", default="summary.csv")
    p.set_defaults(handler=cmd_evaluate)
    return parser


_INTERNAL = {"command", "handler", "config", "dump_config"}


def _settings(parser: argparse.ArgumentParser, args) -> dict:
    sub = parser._subparsers._group_actions[0].choices[args.command]
    return {a.dest: getattr(args, a.dest) for a in sub._actions
            if a.dest not in _INTERNAL and a.dest != "help"}


def _dump_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_dump_value(x) for x in v)
    if isinstance(v, Metric):
        return "euclidean" if v.kind == "euclidean" else f"greatcircle:{v.radius!r}"
    return str(v)


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        actions = {a.dest: a for a in sub._actions}
        cfg = load_config(args.config)
        for key, value in cfg.items():
            if key not in actions or key in _INTERNAL or key == "help":
                raise UsageError(f"{args.config}: unknown setting {key!r}")
            if isinstance(actions[key], argparse._StoreTrueAction):
                try:
                    cfg[key] = _bool(value)
                except argparse.ArgumentTypeError as exc:
                    raise UsageError(f"{args.config}: {key}: {exc}") from None
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)  # flags override the file
    return parser, args


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def build_layout(args, default=None) -> KnotLayout:
    if args.knots and args.knot_grid:
        raise UsageError("give either --knots or --knot-grid, not both")
    if args.knots:
        if not Path(args.knots).is_file():
            raise DataError(f"{args.knots}: no such file")
        try:
            layout = read_knots(args.knots)
        except (ValueError, IndexError) as exc:
            raise DataError(str(exc)) from None
    elif args.knot_grid:
        try:
            layout = parse_knot_grid(args.knot_grid)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    elif default is not None:
        layout = default
    else:
        raise UsageError("one of --knots or --knot-grid is required")
    if args.resolutions is not None:
        L = args.resolutions
        if L < 1:
            raise UsageError("--resolutions must be >= 1")
        levels = layout.levels
        if L > len(levels):
            raise DataError(f"layout has {len(levels)} resolution(s), {L} requested")
        keep = np.isin(layout.res, levels[:L])
        layout = KnotLayout(layout.knots[keep], layout.res[keep])
    return layout


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _check_sigma_eps2(args):
    if args.sigma_eps2 is None:
        raise UsageError(
            "--sigma-eps2 is required: the measurement-error variance is not "
            "identifiable from the data alongside sigma_delta2 and must be "
            "supplied, e.g. from instrument documentation or replicate "
            "measurements")
    if not args.sigma_eps2 > 0:
        raise UsageError("--sigma-eps2 must be positive")


def _em_config(args) -> EmConfig:
    try:
        return EmConfig(args.max_iter, args.tol, args.weak_tol)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _aecm_config(args, bracket=None) -> AecmConfig:
    lo, hi = bracket or args.b_bracket
    init_set = tuple(v for v in AecmConfig.initial_b_set if lo <= v <= hi)
    if lo < hi and not init_set:
        init_set = (0.5 * (lo + hi),)
    try:
        return AecmConfig(_em_config(args), (lo, hi), args.golden_iters, args.quad_tol,
                          init_set or (lo,), args.inner_max_iter, args.max_cycles)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def run_fit(data: Dataset, basis: BasisSpec, args) -> FitResult:
    """Fit with the settings in ``args`` (method, b, tuning)."""
    if args.b is not None and not args.b > 0:
        raise UsageError("--b must be positive")
    if args.method == "em":
        b = args.b if args.b is not None else args.initial_b
        init = initial_params(data, basis, args.sigma_eps2, b)
        return em_fit(init, data, basis, _em_config(args))
    bracket = (args.b, args.b) if args.b is not None else tuple(args.b_bracket)
    cfg = _aecm_config(args, bracket)
    b0 = args.initial_b if bracket[0] <= args.initial_b <= bracket[1] else bracket[0]
    return aecm_fit(initial_params(data, basis, args.sigma_eps2, b0), data, basis, cfg)


def fit_report(res: FitResult) -> dict:
    p = res.params
    rep = {"method": res.method, "loglik": res.loglik, "sigma_delta2": p.sigma_delta2,
           "sigma_eps2": p.sigma_eps2, "K_range": [float(p.K.min()), float(p.K.max())],
           "beta": [float(v) for v in p.beta], "b": p.b,
           "converged": bool(res.converged), "iterations": int(res.iterations)}
    if res.method == "aecm":
        rep["b_hat"] = p.b
        rep["b_trace"] = [[int(c), float(b), float(v)] for c, b, v in res.b_trace]
    return rep


def _metric_dict(m: Metric) -> dict:
    return {"kind": m.kind, "radius": m.radius}


def fit_document(res: FitResult, basis: BasisSpec, data: Dataset) -> dict:
    """Fit result plus everything needed to predict from it later."""
    doc = res.to_dict()
    doc["basis"] = {"metric": _metric_dict(basis.metric),
                    "res": basis.layout.res.tolist(),
                    "knots": basis.layout.knots.tolist()}
    doc["data"] = {"locations": data.locations.tolist(), "X": data.X.tolist(),
                   "y": data.y.tolist(), "vdelta": data.vdelta.tolist(),
                   "veps": data.veps.tolist()}
    doc["report"] = fit_report(res)
    return doc


def load_fit(path):
    """``(FitResult, BasisSpec, Dataset)`` from a fit file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    res = FitResult.from_dict(doc)
    try:
        bd, dd = doc["basis"], doc["data"]
        basis = BasisSpec(KnotLayout(np.array(bd["knots"]), np.array(bd["res"])),
                          Metric(**bd["metric"]))
        data = Dataset(np.array(dd["locations"]), np.array(dd["X"]), np.array(dd["y"]),
                       np.array(dd["vdelta"]), np.array(dd["veps"]))
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: incomplete fit file ({exc})") from None
    return res, basis, data


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    layout = build_layout(args, default=lattice_layout())
    if layout.dim != 1:
        raise UsageError("simulate uses a 1-D lattice; knots must be 1-D")
    if args.replicates < 1:
        raise UsageError("--replicates must be >= 1")
    try:
        design = SimDesign(args.K_type, args.sigma_delta2, args.sigma_eps2, args.b,
                           args.design, args.n)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    basis = BasisSpec(layout, args.metric)
    out = Path(args.out)
    if not out.is_dir():
        raise DataError(f"output directory {out} does not exist")
    with StagedOutputs() as stage:
        for rep in range(args.replicates):
            rng = replicate_rng(args.seed, design, rep)
            K = sample_K(design.K_type, rng, layout.knots)
            fld = simulate_field(design, K, rng, basis)
            d = fld.data
            tag = f"{args.prefix}_{rep + 1:03d}"
            stage.write(out / f"{tag}_obs.csv", _csv_text(
                ["coord1"] + [f"x{j + 1}" for j in range(d.p)] + ["y"],
                [[*d.locations[i], *d.X[i], d.y[i]] for i in range(d.n)]))
            observed = np.zeros(len(fld.sites), int)
            observed[fld.observed] = 1
            stage.write(out / f"{tag}_truth.csv", _csv_text(
                ["coord1", "truth", "y", "observed"],
                zip(fld.sites, fld.truth, fld.y_full, observed)))
            manifest = {"seed": args.seed, "replicate": rep,
                        "design": {"K_type": design.K_type,
                                   "sigma_delta2": design.sigma_delta2,
                                   "sigma_eps2": design.sigma_eps2, "b": design.b,
                                   "design": design.design, "n": design.n,
                                   "domain": list(design.domain),
                                   "beta": list(design.beta)},
                        "knots": {"res": layout.res.tolist(),
                                  "coords": layout.knots.tolist()},
                        "metric": _metric_dict(args.metric),
                        "K": K.tolist(),
                        "observed_sites": fld.sites[fld.observed].tolist()}
            stage.write(out / f"{tag}_manifest.json", json.dumps(manifest, indent=1))
    print(f"wrote {args.replicates} replicate(s) to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    _require(args, "data")
    _check_sigma_eps2(args)
    data = read_observations(args.data)
    basis = BasisSpec(build_layout(args), args.metric)
    if basis.layout.dim != data.locations.shape[1]:
        raise DataError(f"knots are {basis.layout.dim}-D, data are "
                        f"{data.locations.shape[1]}-D")
    res = run_fit(data, basis, args)
    doc = fit_document(res, basis, data)
    with StagedOutputs() as stage:
        stage.write(args.out, json.dumps(doc, indent=1))
    for key, value in doc["report"].items():
        if key == "b_trace":
            print(f"b_trace: {len(value)} candidates (full trace in {args.out})")
        else:
            print(f"{key}: {value}")
    return EXIT_OK


def _grid_design(targets, p, mode):
    ones = np.ones((len(targets), 1))
    if mode == "auto":
        if p == 1:
            mode = "intercept"
        elif p == 1 + targets.shape[1]:
            mode = "coords"
        else:
            raise UsageError(f"model has {p} covariates; supply --targets with x1..x{p}")
    X0 = ones if mode == "intercept" else np.hstack([ones, targets])
    if X0.shape[1] != p:
        raise UsageError(f"--grid-covariates {mode} gives {X0.shape[1]} columns, "
                         f"model has {p}")
    return X0


def predictions_table(out, targets, level, decompose=True):
    lo, hi = prediction_interval(out, level)
    d = targets.shape[1]
    header = [f"coord{j + 1}" for j in range(d)] + ["yhat", "kse", "lo", "hi"]
    cols = [targets[:, j] for j in range(d)] + [out.yhat, out.kse, lo, hi]
    if decompose:
        header += ["mean", "spatial"]
        cols += [out.mean, out.spatial]
    return header, zip(*cols)


def cmd_predict(args) -> int:
    _require(args, "fit")
    if (args.targets is None) == (args.grid is None):
        raise UsageError("give exactly one of --targets or --grid")
    if not 0 < args.level < 1:
        raise UsageError("--level must lie in (0, 1)")
    res, basis, data = load_fit(args.fit)
    if args.targets:
        targets, X0, vd0 = read_targets(args.targets)
    else:
        try:
            targets = grid_targets(args.grid)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        X0, vd0 = _grid_design(targets, data.p, args.grid_covariates), None
    if targets.shape[1] != data.locations.shape[1]:
        raise DataError(f"targets are {targets.shape[1]}-D, data are "
                        f"{data.locations.shape[1]}-D")
    if X0.shape[1] != data.p:
        raise DataError(f"targets have {X0.shape[1]} covariates, model has {data.p}")
    req = PredictionRequest.from_sites(targets, X0, data, vd0, args.snap)
    out = Kriger(res.params, data, basis).predict(req, args.batch_size)
    header, rows = predictions_table(out, targets, args.level, args.decompose)
    with StagedOutputs() as stage:
        stage.write(args.out, _csv_text(header, rows))
    print(f"wrote {len(targets)} predictions to {args.out}")
    return EXIT_OK


def fold_assignment(n: int, k: int, seed: int) -> np.ndarray:
    """Fold label per row: a seeded permutation dealt round-robin."""
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= folds <= n (n={n}, folds={k})")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=int)
    folds[perm] = np.arange(n) % k
    return folds


def _cv_fold(job):
    data, basis, args, test = job
    train = data.subset(np.nonzero(~test)[0])
    held = data.subset(np.nonzero(test)[0])
    res = run_fit(train, basis, args)
    req = PredictionRequest(held.locations, held.X, held.vdelta)
    yhat = Kriger(res.params, train, basis).predict(req).yhat
    return yhat, res.params.b


def cross_validate(data: Dataset, basis: BasisSpec, args):
    """Held-out predictions for every row and the per-fold records."""
    folds = fold_assignment(data.n, args.folds, args.seed)
    jobs = [(data, basis, args, folds == f) for f in range(args.folds)]
    if args.threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(args.threads) as ex:
            results = list(ex.map(_cv_fold, jobs))
    else:
        results = [_cv_fold(j) for j in jobs]
    yhat = np.empty(data.n)
    records = []
    for f, (pred, b) in enumerate(results):
        test = folds == f
        yhat[test] = pred
        err = float(np.mean((pred - data.y[test]) ** 2))
        records.append({"fold": f + 1, "n_train": int((~test).sum()),
                        "n_test": int(test.sum()), "mspe": err, "b": b})
    return yhat, folds, records


def cmd_cv(args) -> int:
    _require(args, "data")
    _check_sigma_eps2(args)
    data = read_observations(args.data)
    basis = BasisSpec(build_layout(args), args.metric)
    if not 2 <= args.folds <= data.n:
        raise UsageError(f"--folds must lie in [2, {data.n}]")
    yhat, _, records = cross_validate(data, basis, args)
    pooled = float(np.mean((yhat - data.y) ** 2))
    rows = [[r["fold"], r["n_train"], r["n_test"], r["mspe"], r["b"]] for r in records]
    rows.append(["all", data.n, data.n, pooled, ""])
    with StagedOutputs() as stage:
        stage.write(args.out, _csv_text(["fold", "n_train", "n_test", "mspe", "b"], rows))
    print(f"{args.folds}-fold MSPE {pooled:.6g}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    for k in args.K_types:
        if k not in K_TYPES:
            raise UsageError(f"unknown K type {k!r}")
    for d in args.designs:
        if d not in DESIGNS:
            raise UsageError(f"unknown design {d!r}")
    cells = design_grid(args.K_types, args.sigma_eps2_values, args.b_values,
                        args.sigma_delta2_values, args.designs)
    try:
        cfg = StudyConfig(args.replicates, args.seed, _em_config(args),
                          _aecm_config(args), args.initial_b, args.level,
                          mspe_sites=args.mspe_sites, coverage_sites=args.coverage_sites)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    bad = [c for c in args.by if c not in ("K_type", "sigma_eps2", "b",
                                          "sigma_delta2", "design")]
    if bad:
        raise UsageError(f"unknown grouping column(s) {bad}")
    summary, rows = run_study(cells, cfg, args.threads, tuple(args.by))
    with StagedOutputs() as stage:
        stage.write(args.out, _table_text(summary))
        if args.rows_out:
            stage.write(args.rows_out, _table_text(rows))
    print(f"wrote {len(summary)} summary rows to {args.out}")
    return EXIT_OK


def _table_text(records: list[dict]) -> str:
    header: list[str] = []
    for r in records:
        header += [k for k in r if k not in header]
    return _csv_text(header, ([r.get(k, "") for k in header] for r in records))


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    try:
        parser, args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.dump_config:
        for key, value in _settings(parser, args).items():
            if value is None:
                print(f"# {key} =")
            else:
                print(f"{key} = {_dump_value(value)}")
        return EXIT_OK
    try:
        return args.handler(args)
    except UsageError as exc:
        code, msg = EXIT_USAGE, str(exc)
    except (EstimationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        code, msg = EXIT_NUMERIC, f"numerical failure: {exc}"
    except (DataError, ValueError, OSError) as exc:
        code, msg = EXIT_DATA, str(exc)
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
