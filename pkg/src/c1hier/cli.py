"""Command line: convergence runs, geometry verification and space reports."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .adaptivity import RunConfig, adaptive_loop, build_space
from .errors import ConstructionError, GeometryError, SolverError, ValidationError
from .geometry import bundled_geometry, load_geometry, verify_geometry
from .problems import example_problem

log = logging.getLogger(__name__)

HEADER = "ndof,error,estimator"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


# -- tables --------------------------------------------------------------------------
@dataclass
class ConvergenceTable:
    """Rows of ``(ndof, error, estimator)``."""

    ndof: np.ndarray
    error: np.ndarray
    estimator: np.ndarray

    def __post_init__(self):
        self.ndof = np.asarray(self.ndof, dtype=np.int64).ravel()
        self.error = np.asarray(self.error, dtype=float).ravel()
        self.estimator = np.asarray(self.estimator, dtype=float).ravel()
        if not (self.ndof.size == self.error.size == self.estimator.size):
            raise ValidationError("table columns must have equal length")
        if np.any(np.diff(self.ndof) <= 0):
            raise ValidationError("ndof must be strictly increasing")

    def __len__(self):
        return int(self.ndof.size)

    def __eq__(self, other):
        if not isinstance(other, ConvergenceTable):
            return NotImplemented
        return (np.array_equal(self.ndof, other.ndof)
                and np.array_equal(self.error, other.error, equal_nan=True)
                and np.array_equal(self.estimator, other.estimator, equal_nan=True))

    @classmethod
    def from_records(cls, records) -> "ConvergenceTable":
        return cls([r.ndof for r in records], [r.error for r in records], [r.estimator for r in records])


def _fmt(x: float) -> str:
    return f"{x:.16e}" if math.isfinite(x) else str(x)


def format_table(table: ConvergenceTable) -> str:
    lines = [HEADER]
    for n, e, s in zip(table.ndof, table.error, table.estimator):
        lines.append(f"{int(n)},{_fmt(float(e))},{_fmt(float(s))}")
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> ConvergenceTable:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines or lines[0].strip() != HEADER:
        raise ValidationError(f"expected header {HEADER!r}")
    rows = [ln.split(",") for ln in lines[1:]]
    if any(len(r) != 3 for r in rows):
        raise ValidationError("every row needs three columns")
    return ConvergenceTable([int(r[0]) for r in rows], [float(r[1]) for r in rows], [float(r[2]) for r in rows])


def write_table(table: ConvergenceTable, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write(format_table(table))
    return path


def read_table(path) -> ConvergenceTable:
    return parse_table(Path(path).read_text())


def table_name(example: int, degree: int, smoothness: str, mode: str) -> str:
    """File stem such as ``ex1_p3_C1`` (``_glob`` for uniform refinement)."""
    stem = f"ex{example}_p{degree}_{smoothness.upper()}"
    return stem + "_glob" if mode == "uniform" else stem


# -- rates ---------------------------------------------------------------------------
@dataclass
class RateReport:
    rates: np.ndarray
    undefined: np.ndarray

    def __iter__(self):
        return iter(self.rates)


def eoc(table, values=None) -> RateReport:
    """Per-step rates ``-log(e[i+1]/e[i]) / log(n[i+1]/n[i])``.

    Args:
        table: :class:`ConvergenceTable`, or an NDOF array when ``values`` is given
        values: error values (defaults to the table's error column)

    Steps with a non-positive or non-finite error are flagged in ``undefined``
    and get a NaN rate.
    """
    if isinstance(table, ConvergenceTable):
        n = table.ndof.astype(float)
        e = table.error if values is None else np.asarray(values, dtype=float)
    else:
        n = np.asarray(table, dtype=float)
        e = np.asarray(values, dtype=float)
    if n.size < 2 or e.size != n.size:
        raise ValidationError("rates need at least two rows")
    ok = np.isfinite(e) & (e > 0)
    bad = ~(ok[1:] & ok[:-1]) | (np.diff(n) == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = -np.diff(np.log(np.where(ok, e, 1.0))) / np.diff(np.log(n))
    rates[bad] = np.nan
    return RateReport(rates, bad)


def fitted_rate(ndof, values, fraction: float = 0.25) -> float:
    """Least-squares log-log slope (sign flipped) over rows with ``ndof >= fraction * ndof[-1]``."""
    n = np.asarray(ndof, dtype=float)
    v = np.asarray(values, dtype=float)
    sel = (n >= fraction * n[-1]) & np.isfinite(v) & (v > 0)
    if sel.sum() < 2:
        return float("nan")
    return float(-np.polyfit(np.log(n[sel]), np.log(v[sel]), 1)[0])


# -- plot ----------------------------------------------------------------------------
COLORS = ("#1f4e9c", "#c0392b", "#1e8449", "#8e44ad", "#d68910", "#17202a")


def _decades(lo, hi):
    return list(range(math.floor(math.log10(lo)), math.ceil(math.log10(hi)) + 1))


def emit_plot(tables, path, slopes=(), title: str = "") -> Path:
    """Log-log SVG with error (solid) and estimator (dashed) polylines per table.

    Args:
        tables: mapping label -> :class:`ConvergenceTable`
        path: output file
        slopes: reference slopes drawn as triangles below the curves
        title: optional caption
    """
    tables = dict(tables)
    if not tables or any(len(t) == 0 for t in tables.values()):
        raise ValidationError("cannot plot an empty table")
    series = []
    for k, (label, t) in enumerate(tables.items()):
        color = COLORS[k % len(COLORS)]
        series.append((f"{label} (error)", t.ndof, t.error, color, ""))
        if np.any(np.isfinite(t.estimator) & (t.estimator > 0)):
            series.append((f"{label} (estimator)", t.ndof, t.estimator, color, "6,4"))
    xs = np.concatenate([s[1] for s in series]).astype(float)
    ys = np.concatenate([s[2][np.isfinite(s[2]) & (s[2] > 0)] for s in series])
    if ys.size == 0:
        raise ValidationError("no positive values to plot")
    W, H, L, R, T, B = 640, 480, 80, 200, 30, 60
    dx = _decades(xs.min(), xs.max())
    dy = _decades(ys.min(), ys.max())
    x0, x1, y0, y1 = dx[0], max(dx[-1], dx[0] + 1), dy[0], max(dy[-1], dy[0] + 1)

    def px(x):
        return L + (math.log10(x) - x0) / (x1 - x0) * (W - L - R)

    def py(y):
        return H - B - (math.log10(y) - y0) / (y1 - y0) * (H - T - B)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect x="{L}" y="{T}" width="{W - L - R}" height="{H - T - B}" fill="none" stroke="black"/>']
    for d in range(x0, x1 + 1):
        x = px(10.0 ** d)
        out.append(f'<line x1="{x:.2f}" y1="{T}" x2="{x:.2f}" y2="{H - B}" stroke="#ddd"/>')
        out.append(f'<text x="{x:.2f}" y="{H - B + 18}" font-size="12" text-anchor="middle">1e{d}</text>')
    for d in range(y0, y1 + 1):
        y = py(10.0 ** d)
        out.append(f'<line x1="{L}" y1="{y:.2f}" x2="{W - R}" y2="{y:.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{L - 6}" y="{y + 4:.2f}" font-size="12" text-anchor="end">1e{d}</text>')
    out.append(f'<text x="{(L + W - R) / 2}" y="{H - 15}" font-size="13" text-anchor="middle">NDOF</text>')
    if title:
        out.append(f'<text x="{(L + W - R) / 2}" y="{T - 10}" font-size="13" text-anchor="middle">{escape(title)}</text>')
    for k, (label, n, v, color, dash) in enumerate(series):
        ok = np.isfinite(v) & (v > 0)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(n[ok], v[ok]))
        style = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5"{style} points="{pts}">'
                   f'<title>{escape(label)}</title></polyline>')
        ly = T + 16 + 18 * k
        out.append(f'<line x1="{W - R + 10}" y1="{ly}" x2="{W - R + 40}" y2="{ly}" stroke="{color}"{style}/>')
        out.append(f'<text x="{W - R + 45}" y="{ly + 4}" font-size="11">{escape(label)}</text>')
    # reference triangles anchored below the last point of the first series
    n_last, e_last = float(series[0][1][-1]), float(series[0][2][-1])
    for j, s in enumerate(slopes):
        xa, xb = n_last / 4.0, n_last / 2.0
        ya = e_last / (3.0 * (j + 1)) * 4.0 ** s
        yb = ya * (xa / xb) ** s
        if not (ya > 0 and yb > 0):
            continue
        pa, pb, pc = (px(xa), py(ya)), (px(xb), py(yb)), (px(xb), py(ya))
        out.append(f'<polygon class="slope" fill="none" stroke="black" points="{pa[0]:.2f},{pa[1]:.2f} '
                   f'{pb[0]:.2f},{pb[1]:.2f} {pc[0]:.2f},{pc[1]:.2f}"/>')
        out.append(f'<text x="{pb[0] + 4:.2f}" y="{(pb[1] + pc[1]) / 2:.2f}" font-size="11">{s:g}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


# -- commands ------------------------------------------------------------------------
def reference_slopes(example: int, degree: int) -> tuple:
    """Optimal NDOF rates: ``p/2`` in the H1 seminorm, ``(p-1)/2`` in the H2 seminorm."""
    return ((degree - 1) / 2,) if example_problem(example).error_norm == "h2" else (degree / 2,)


def run_example(config: RunConfig, out_dir=None, plot: bool = True, stream=None) -> ConvergenceTable:
    """Run one configuration, write ``<name>.csv`` and ``<name>.svg``, print a rate summary."""
    stream = sys.stdout if stream is None else stream
    records = adaptive_loop(config)
    table = ConvergenceTable.from_records(records)
    name = table_name(config.example, config.degree, config.smoothness, config.mode)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_table(table, out / f"{name}.csv")
        if plot:
            emit_plot({name: table}, out / f"{name}.svg", reference_slopes(config.example, config.degree), name)
    print(f"{name}: {len(table)} solves, final ndof {table.ndof[-1]}, error {table.error[-1]:.6e}", file=stream)
    if len(table) >= 2:
        rates = eoc(table)
        print("step rates: " + " ".join("n/a" if u else f"{r:.3f}" for r, u in zip(rates.rates, rates.undefined)),
              file=stream)
        print(f"fitted rate (ndof >= final/4): error {fitted_rate(table.ndof, table.error):.3f}"
              f", estimator {fitted_rate(table.ndof, table.estimator):.3f}", file=stream)
    return table


def _load_any_geometry(name_or_path: str):
    p = Path(name_or_path)
    return load_geometry(p) if p.exists() else bundled_geometry(name_or_path)


def _cmd_run(args) -> int:
    cfg = RunConfig(example=args.example, degree=args.degree, smoothness=args.smoothness, mode=args.mode,
                    theta=args.theta, budget=args.budget, max_iter=args.max_iter)
    run_example(cfg, args.out, plot=not args.no_plot)
    return EXIT_OK


def _cmd_verify(args) -> int:
    report = verify_geometry(_load_any_geometry(args.path))
    print(json.dumps(report, indent=2))
    return EXIT_OK if report["analysis_suitable"] else EXIT_VALIDATION


def _cmd_dump(args) -> int:
    space = build_space(args.geometry, args.degree, args.elements, args.smoothness)
    s = space.space(0)
    report = {"geometry": args.geometry, "degree": args.degree, "regularity": args.degree - 2,
              "elements_per_direction": args.elements, "smoothness": args.smoothness,
              "n": s.n, "n0": s.n0, "n1": s.n1, "dim": s.dim}
    if args.json:
        report["hierarchy"] = space.to_dict()
    print(json.dumps(report, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="c1hier", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="convergence run of one example")
    r.add_argument("--example", type=int, choices=(1, 2, 3, 4), required=True)
    r.add_argument("--degree", type=int, choices=(3, 4), default=3)
    r.add_argument("--smoothness", choices=("c1", "c0"), default="c1")
    r.add_argument("--mode", choices=("adaptive", "uniform", "corner"), default=None)
    r.add_argument("--theta", type=float, default=None)
    r.add_argument("--budget", type=int, default=2000)
    r.add_argument("--max-iter", type=int, default=60)
    r.add_argument("--out", default=".")
    r.add_argument("--no-plot", action="store_true")
    r.set_defaults(func=_cmd_run)
    v = sub.add_parser("verify-geometry", help="AS-G1 report of a geometry file or bundled name")
    v.add_argument("path")
    v.set_defaults(func=_cmd_verify)
    d = sub.add_parser("dump-space", help="dimensions of the one-level space")
    d.add_argument("--geometry", default="lshape")
    d.add_argument("--degree", type=int, choices=(3, 4), default=3)
    d.add_argument("--elements", type=int, default=4)
    d.add_argument("--smoothness", choices=("c1", "c0"), default="c1")
    d.add_argument("--json", action="store_true", help="include the hierarchy dump")
    d.set_defaults(func=_cmd_dump)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    if getattr(args, "mode", "x") is None:
        args.mode = "corner" if args.example == 4 else "adaptive"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValidationError, GeometryError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SolverError, ConstructionError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
