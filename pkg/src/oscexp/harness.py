"""Command-line driver for the drift, convergence, efficiency, resonance and
verify experiments.  Every experiment writes one CSV file into ``--out``.

Exit status: 0 ok, 1 a verify check failed, 2 bad configuration,
3 runtime error (partial results are flushed first).
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NonFinite
from .integrators import BASELINE_IDS, METHOD_IDS, integrate, reference_solve
from .model import builtin_problem
from .verify import (
    certify,
    convergence_study,
    default_ratio_grid,
    energy_drift,
    resonance_scan,
)

log = logging.getLogger("oscexp")

EXPERIMENTS = ("drift", "convergence", "efficiency", "resonance", "verify")
ALL_METHODS = METHOD_IDS + BASELINE_IDS

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

CSV_COLUMNS = {
    "drift": ("method", "eps", "h", "t", "err_rel"),
    "convergence": ("method", "eps", "h", "err_x", "err_v", "skipped"),
    "resonance": ("method", "eps", "ratio", "ratio_times_normB", "err_x"),
    "verify": ("check", "method", "value", "threshold", "pass"),
    "efficiency": ("method", "eps", "h", "cpu_seconds", "err_x"),
}

_DEFAULTS = {
    "drift": dict(methods=ALL_METHODS, eps=(0.05,), T=1000.0, stride=100),
    "convergence": dict(methods=METHOD_IDS, eps=(2.0 ** -4, 2.0 ** -6), T=1.0, stride=1),
    "efficiency": dict(methods=ALL_METHODS, eps=(0.05,), T=10.0, stride=1),
    "resonance": dict(methods=METHOD_IDS, eps=(2.0 ** -10,), T=1.0, stride=1),
    "verify": dict(methods=METHOD_IDS, eps=(), T=100.0, stride=1),
}

LONG_DRIFT_T = 100000.0


@dataclass
class ExperimentConfig:
    experiment: str
    methods: tuple
    eps: tuple
    T: float
    stride: int
    out: Path
    seed: int = 42
    h: tuple = ()
    i_range: tuple = (6, 10)
    n_ratios: int = 200
    ratio_max: float = 4.5 * math.pi
    fp_tol: float = 1e-14
    fp_max: int = 10
    quad_order: int = 5
    workers: int = 1

    def em1_options(self):
        return dict(fp_tol=self.fp_tol, fp_max=self.fp_max, quad_order=self.quad_order)


def _method_list(text):
    items = [m.strip() for m in text.replace(",", " ").split() if m.strip()]
    bad = [m for m in items if m not in ALL_METHODS]
    if bad or not items:
        raise argparse.ArgumentTypeError(
            f"unknown method(s) {', '.join(bad) or '(none)'}; choose from {', '.join(ALL_METHODS)}"
        )
    return items


def _positive_float(text):
    try:
        val = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not (val > 0 and math.isfinite(val)):
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return val


def _positive_int(text):
    try:
        val = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if val < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1: {text!r}")
    return val


def build_parser():
    parser = argparse.ArgumentParser(
        prog="oscexp",
        description="Exponential integrators for x'' = (1/eps) B x' + F(x): experiments.",
    )
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    helps = {
        "drift": "relative energy error along long runs (default eps=0.05, h=eps, T=1000)",
        "convergence": "global errors at T=1 for h=2^-i (default eps in {2^-4, 2^-6}, i=6..10)",
        "efficiency": "CPU time against error at T=10",
        "resonance": "error at T=1 against h/eps (default eps=2^-10, 200 ratios in (0, 4.5 pi])",
        "verify": "structural certification; exits 1 if any check fails",
    }
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--methods", type=_method_list, action="extend",
                       help="method ids, comma or space separated")
        p.add_argument("--eps", type=_positive_float, nargs="+", help="epsilon values")
        p.add_argument("--T", type=_positive_float, help="final time")
        p.add_argument("--out", type=Path, default=Path("results"), help="output directory")
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--fp-tol", type=_positive_float, default=1e-14, help="EM1 fixed-point tolerance")
        p.add_argument("--fp-max", type=_positive_int, default=10, help="EM1 iteration cap")
        p.add_argument("--quad-order", type=_positive_int, default=5, help="EM1 Gauss-Legendre nodes")
        p.add_argument("--workers", type=_positive_int, default=1, help="grid worker threads")
        if name in ("drift", "efficiency"):
            p.add_argument("--h", type=_positive_float, nargs="+",
                           help="step sizes (drift default: h = eps)")
        if name == "drift":
            p.add_argument("--stride", type=_positive_int, help="record every n-th step")
            p.add_argument("--long", action="store_true",
                           help=f"use the long horizon T={LONG_DRIFT_T:g}")
        if name in ("convergence", "efficiency"):
            p.add_argument("--i-min", type=int, default=6, help="smallest i in h = 2^-i")
            p.add_argument("--i-max", type=int, default=10, help="largest i in h = 2^-i")
        if name == "resonance":
            p.add_argument("--n-ratios", type=_positive_int, default=200)
            p.add_argument("--ratio-max", type=_positive_float, default=4.5 * math.pi)
    return parser


def parse_cli(args=None):
    """Parse and validate arguments; exits with status 2 on a bad flag."""
    parser = build_parser()
    ns = parser.parse_args(args)
    d = _DEFAULTS[ns.experiment]
    methods = tuple(ns.methods) if ns.methods else tuple(d["methods"])
    if ns.experiment in ("convergence", "resonance", "verify"):
        bad = [m for m in methods if m not in METHOD_IDS]
        if bad:
            parser.error(f"argument --methods: {', '.join(bad)} not available for {ns.experiment}")
    eps = tuple(ns.eps) if ns.eps else tuple(d["eps"])
    if any(e > 1 for e in eps):
        parser.error("argument --eps: epsilon must lie in (0, 1]")
    T = ns.T if ns.T is not None else d["T"]
    if getattr(ns, "long", False):
        T = LONG_DRIFT_T
    if ns.experiment == "convergence" and T > 1:
        parser.error("argument --T: convergence runs require T <= 1")
    cfg = ExperimentConfig(
        experiment=ns.experiment, methods=methods, eps=eps, T=T,
        stride=getattr(ns, "stride", None) or d["stride"], out=ns.out, seed=ns.seed,
        fp_tol=ns.fp_tol, fp_max=ns.fp_max, quad_order=ns.quad_order, workers=ns.workers,
    )
    if getattr(ns, "h", None):
        cfg.h = tuple(ns.h)
    if hasattr(ns, "i_min"):
        if ns.i_min > ns.i_max:
            parser.error("argument --i-min: must not exceed --i-max")
        cfg.i_range = (ns.i_min, ns.i_max)
    if hasattr(ns, "n_ratios"):
        cfg.n_ratios, cfg.ratio_max = ns.n_ratios, ns.ratio_max
    return cfg


# ----------------------------------------------------------------------------
# CSV output


def fmt(value):
    """CSV cell: floats with 17 significant digits, booleans as true/false."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".16e")
    return str(value)


class CsvSink:
    """Single writer for one experiment's CSV; header written on open."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(columns)
        self.columns = columns

    def write(self, *row):
        if len(row) != len(self.columns):
            raise ValueError("row does not match the CSV schema")
        self._w.writerow([fmt(v) for v in row])

    def flush(self):
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_csv(path):
    """Read an emitted CSV back into a list of dicts with floats parsed."""
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                try:
                    parsed[k] = float(v)
                except ValueError:
                    parsed[k] = {"true": True, "false": False}.get(v, v)
            out.append(parsed)
    return out


# ----------------------------------------------------------------------------
# experiments


def _opts(cfg, method):
    return cfg.em1_options() if method == "EM1" else {}


def _run_drift(cfg, sink):
    status = EXIT_OK
    for method in cfg.methods:
        for eps in cfg.eps:
            prob = builtin_problem(eps)
            for h in cfg.h or (eps,):
                try:
                    tr = integrate(method, prob, h, cfg.T, stride=cfg.stride, **_opts(cfg, method))
                except NonFinite as exc:
                    log.error("%s", exc)
                    tr = exc.partial
                    status = EXIT_RUNTIME
                ds = energy_drift(tr) if len(tr.t) > 1 else None
                errs = ds.err if ds is not None else np.zeros(len(tr.t))
                for t, e in zip(tr.t, errs):
                    sink.write(method, eps, h, t, e)
                sink.flush()
                if status != EXIT_OK:
                    return status
                print(f"{method:4s} eps={eps:<8g} h={h:<8g} max|ERR|={ds.max_abs:.3e} "
                      f"growth={ds.growth_ratio:.2f}")
    return status


def _run_convergence(cfg, sink):
    lo, hi = cfg.i_range
    for method in cfg.methods:
        table = convergence_study(method, cfg.eps, range(lo, hi + 1), cfg.T,
                                  workers=cfg.workers, **_opts(cfg, method))
        for r in table.rows:
            sink.write(r.method, r.epsilon, r.h, r.err_x, r.err_v, r.skipped)
        sink.flush()
        for eps in table.epsilons:
            print(f"{method:4s} eps={eps:<10g} slope_x={table.slope_x(eps):.3f} "
                  f"slope_v={table.slope_v(eps):.3f}")
    return EXIT_OK


def _run_efficiency(cfg, sink):
    lo, hi = cfg.i_range
    hs = cfg.h or tuple(2.0 ** -i for i in range(lo, hi + 1))
    for eps in cfg.eps:
        prob = builtin_problem(eps)
        ends = sorted({round(cfg.T / h) * h for h in hs})
        ref = reference_solve(prob, max(ends), 1e-12, t_eval=ends)
        ref_x = dict(zip(ref.t, ref.x))
        for method in cfg.methods:
            for h in hs:
                n = round(cfg.T / h)
                t0 = time.process_time()
                try:
                    tr = integrate(method, prob, h, n * h, stride=n, **_opts(cfg, method))
                    xr = ref_x[n * h]
                    err = float(np.linalg.norm(tr.x[-1] - xr) / np.linalg.norm(xr))
                except NonFinite:
                    err = math.inf
                sink.write(method, eps, h, time.process_time() - t0, err)
            sink.flush()
    return EXIT_OK


def _run_resonance(cfg, sink):
    ratios = default_ratio_grid(cfg.n_ratios, cfg.ratio_max)
    for method in cfg.methods:
        for eps in cfg.eps:
            pts = resonance_scan(method, eps, ratios, cfg.T, workers=cfg.workers,
                                 **_opts(cfg, method))
            for p in pts:
                sink.write(p.method, p.epsilon, p.ratio, p.ratio_times_normB, p.err_x)
            sink.flush()
            finite = [p.err_x for p in pts if math.isfinite(p.err_x)]
            print(f"{method:4s} eps={eps:<10g} median err_x={np.median(finite):.3e} "
                  f"max err_x={max(p.err_x for p in pts):.3e}")
    return EXIT_OK


def _run_verify(cfg, sink):
    results = certify(cfg.methods, seed=cfg.seed, em1_T=cfg.T, fp_tol=cfg.fp_tol,
                      fp_max=cfg.fp_max, quad_order=cfg.quad_order)
    width = max(len(r.check) for r in results)
    for r in results:
        sink.write(r.check, r.method, r.value, r.threshold, r.passed)
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.check:<{width}}  {r.method:4s}  "
              f"value={r.value:.3e}  threshold={r.threshold:.1e}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


_RUNNERS = {
    "drift": _run_drift,
    "convergence": _run_convergence,
    "efficiency": _run_efficiency,
    "resonance": _run_resonance,
    "verify": _run_verify,
}


def run_experiment(cfg):
    """Run one experiment, writing ``<out>/<experiment>.csv``; returns exit status."""
    path = Path(cfg.out) / f"{cfg.experiment}.csv"
    with CsvSink(path, CSV_COLUMNS[cfg.experiment]) as sink:
        try:
            return _RUNNERS[cfg.experiment](cfg, sink)
        except Exception:
            sink.flush()
            log.exception("experiment %s failed", cfg.experiment)
            return EXIT_RUNTIME


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    cfg = parse_cli(argv)
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
