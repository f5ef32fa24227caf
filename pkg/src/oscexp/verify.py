"""Empirical certification of the structural and convergence properties.

Checks here are pure functions of their inputs.  Grid experiments
(:func:`convergence_study`, :func:`resonance_scan`) can fan out over a thread
pool, but results are always assembled in grid order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import NearSingularCoefficient, NonFinite
from .integrators import (
    METHOD_IDS,
    MethodSpec,
    integrate,
    make_method,
    reference_solve,
    scalar_coefficients,
)
from .model import builtin_problem, exact_linear_solution, linear_problem
from .spectral import phi_scalar

__all__ = [
    "Eq17Residual",
    "DriftSeries",
    "ConvergenceRow",
    "ConvergenceTable",
    "ResonancePoint",
    "CheckResult",
    "eq17_residual",
    "canonical_map",
    "map_symplecticity_residual",
    "symplecticity_residual",
    "exact_flow_symplecticity_residual",
    "symmetry_residual",
    "random_states",
    "energy_drift",
    "fit_slope",
    "convergence_study",
    "resonance_scan",
    "default_ratio_grid",
    "certify",
]

#: Methods whose convergence theorem assumes h <= C*eps.
H_LE_EPS_METHODS = ("M1", "M2", "EM1")


# ----------------------------------------------------------------------------
# symplecticity conditions on the scalar coefficient functions


@dataclass(frozen=True)
class Eq17Residual:
    """Max residuals of the three symplecticity identity families.

    r1: spread of gamma_j - K beta_j around its value d_j at the first sample.
    r2: the phi_1 / exp identity per stage.
    r3: the cross-stage identity over all (i, j).
    """

    r1: float
    r2: float
    r3: float
    d: tuple
    samples: tuple

    @property
    def worst(self):
        return max(self.r1, self.r2, self.r3)


def eq17_residual(method_id, k_samples=None, spec=None, h=None, eps=None):
    """Evaluate the symplecticity conditions at ``K = i*k`` for each sample.

    Without ``k_samples`` the samples are the eigenvalues of the bound
    ``h*Omega``, i.e. ``(h/eps) * spec.omegas``.
    """
    if k_samples is None:
        k_samples = (h / eps) * np.asarray(spec.omegas)
    k_samples = tuple(float(k) for k in k_samples)
    conj = np.conj
    d_ref = None
    r1 = r2 = r3 = 0.0
    for k in k_samples:
        K = 1j * k
        c, alpha, beta, gamma = scalar_coefficients(method_id, K)
        s = len(c)
        dj = gamma - K * beta
        if d_ref is None:
            d_ref = dj
        r1 = max(r1, float(np.max(np.abs(dj - d_ref))))
        p1b = conj(phi_scalar(1, K))
        for j in range(s):
            pcj = conj(phi_scalar(1, c[j] * K))
            lhs = gamma[j] * (p1b - c[j] * pcj)
            rhs = beta[j] * (np.exp(-K) + K * p1b - c[j] * K * pcj)
            r2 = max(r2, abs(lhs - rhs))
        for i in range(s):
            for j in range(s):
                lhs = (conj(beta[i]) * gamma[j] - 0.5 * K * conj(beta[i]) * beta[j]
                       - conj(alpha[j, i]) * (gamma[j] - K * beta[j]))
                rhs = (beta[j] * conj(gamma[i]) + 0.5 * K * beta[j] * conj(beta[i])
                       - alpha[i, j] * (conj(gamma[i]) + K * conj(beta[i])))
                r3 = max(r3, abs(lhs - rhs))
    return Eq17Residual(float(r1), float(r2), float(r3), tuple(complex(x) for x in d_ref),
                        k_samples)


# ----------------------------------------------------------------------------
# finite-difference symplecticity and symmetry


_S_CACHE = {}


def _structure_matrix(d):
    S = _S_CACHE.get(d)
    if S is None:
        I = np.eye(d)
        Z = np.zeros((d, d))
        S = _S_CACHE[d] = np.block([[Z, I], [-I, Z]])
    return S


def canonical_map(prob, xv_map):
    """Lift a map on (x, v) to canonical variables (x, p)."""
    half = prob.B / (2.0 * prob.epsilon)
    d = prob.dim

    def g(y):
        x, p = y[:d], y[d:]
        x1, v1 = xv_map(x, p + half @ x)
        return np.concatenate([x1, v1 - half @ x1])

    return g


def map_symplecticity_residual(g, y, delta=None):
    """||J^T S J - S||_inf for the central-difference Jacobian of ``g`` at ``y``."""
    y = np.asarray(y, dtype=float)
    n = y.size
    if delta is None:
        delta = 1e-5 * max(1.0, float(np.max(np.abs(y))))
    J = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = delta
        J[:, k] = (g(y + e) - g(y - e)) / (2.0 * delta)
    S = _structure_matrix(n // 2)
    return float(np.linalg.norm(J.T @ S @ J - S, np.inf))


def _bound(method, prob, h, **opts):
    if isinstance(method, MethodSpec):
        return method
    return make_method(method, prob, h, **opts)


def _xv_map(m):
    from .integrators import _kernel

    kernel = _kernel(m)

    def f(x, v):
        x1, v1, *_ = kernel(m, x, v)
        return x1, v1

    return f


def symplecticity_residual(method, prob, state, h, delta=None, **opts):
    """Finite-difference symplecticity defect of one step in (x, p)."""
    m = _bound(method, prob, h, **opts)
    g = canonical_map(prob, _xv_map(m))
    half = prob.B / (2.0 * prob.epsilon)
    y = np.concatenate([state.x, state.v - half @ state.x])
    return map_symplecticity_residual(g, y, delta)


def exact_flow_symplecticity_residual(prob, state, h, delta=None):
    """Same defect for the exact flow of a linear problem (oracle)."""

    def flow(x, v):
        s = exact_linear_solution(prob, h, x0=x, v0=v)
        return s.x, s.v

    g = canonical_map(prob, flow)
    half = prob.B / (2.0 * prob.epsilon)
    y = np.concatenate([state.x, state.v - half @ state.x])
    return map_symplecticity_residual(g, y, delta)


def symmetry_residual(method, prob, state, h, **opts):
    """Relative distance between ``state`` and step(-h)(step(h)(state))."""
    method_id = method.id if isinstance(method, MethodSpec) else method
    fwd = _xv_map(make_method(method_id, prob, h, **opts))
    bwd = _xv_map(make_method(method_id, prob, -h, **opts))
    y0 = np.concatenate([state.x, state.v])
    x1, v1 = fwd(state.x, state.v)
    x2, v2 = bwd(x1, v1)
    y2 = np.concatenate([x2, v2])
    return float(np.max(np.abs(y2 - y0)) / max(float(np.max(np.abs(y0))), 1e-300))


# ----------------------------------------------------------------------------
# energy drift


@dataclass(frozen=True)
class DriftSeries:
    times: np.ndarray
    err: np.ndarray
    max_abs: float
    growth_ratio: float


def energy_drift(traj):
    """Relative energy error series of a trajectory.

    ``growth_ratio`` is max|ERR| over the second half of the time span
    divided by max|ERR| over the first half (floored at 1e-15).
    """
    if len(traj.t) < 2:
        raise ValueError("need at least two samples")
    E0 = traj.E[0]
    err = (traj.E - E0) / E0
    err[0] = 0.0
    t = traj.t
    mid = 0.5 * (t[0] + t[-1])
    first = np.abs(err[t <= mid])
    second = np.abs(err[t > mid])
    ratio = (float(second.max()) if second.size else 0.0) / max(float(first.max()), 1e-15)
    return DriftSeries(times=t.copy(), err=err, max_abs=float(np.max(np.abs(err))),
                       growth_ratio=ratio)


# ----------------------------------------------------------------------------
# convergence


def fit_slope(h, err):
    """Least-squares slope of log(err) against log(h)."""
    h = np.asarray(h, dtype=float)
    err = np.asarray(err, dtype=float)
    ok = np.isfinite(err) & (err > 0)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(h[ok]), np.log(err[ok]), 1)[0])


@dataclass(frozen=True)
class ConvergenceRow:
    method: str
    epsilon: float
    h: float
    err_x: float
    err_v: float
    skipped: bool = False


@dataclass
class ConvergenceTable:
    method: str
    rows: list = field(default_factory=list)

    def __post_init__(self):
        self.rows.sort(key=lambda r: (r.epsilon, r.h))

    @property
    def epsilons(self):
        return sorted({r.epsilon for r in self.rows})

    def for_eps(self, eps):
        return [r for r in self.rows if r.epsilon == eps and not r.skipped]

    def slope_x(self, eps):
        rows = self.for_eps(eps)
        return fit_slope([r.h for r in rows], [r.err_x for r in rows])

    def slope_v(self, eps):
        rows = self.for_eps(eps)
        return fit_slope([r.h for r in rows], [r.err_v for r in rows])

    def _by_h(self, attr):
        out = {}
        for r in self.rows:
            if not r.skipped:
                out.setdefault(r.h, []).append(getattr(r, attr))
        return out

    def uniform_err_x(self):
        """h -> max over epsilon of err_x."""
        return {h: max(v) for h, v in sorted(self._by_h("err_x").items())}

    def spread_x(self):
        """h -> (max / min) over epsilon of err_x at that h."""
        return {h: max(v) / min(v) for h, v in sorted(self._by_h("err_x").items()) if len(v) > 1}


@lru_cache(maxsize=64)
def _reference_states(problem_factory, eps, times, tol):
    prob = problem_factory(eps)
    ref = reference_solve(prob, max(times), tol, t_eval=sorted(times))
    return {float(t): (x, v) for t, x, v in zip(ref.t, ref.x, ref.v)}


def _rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def convergence_study(method, eps_list, i_range=range(6, 11), T=1.0, tol=1e-12,
                      problem_factory=builtin_problem, workers=1, **method_options):
    """Global relative errors at t = T over an (epsilon, h = 2^-i) grid.

    For M1, M2 and EM1 pairs with h > epsilon are skipped and recorded as
    such.
    """
    if T > 1.0:
        raise ValueError("T must not exceed 1 (reference solver feasibility)")
    grid = [(eps, 2.0 ** -i) for eps in eps_list for i in i_range]

    def run(point):
        eps, h = point
        if method in H_LE_EPS_METHODS and h > eps:
            return ConvergenceRow(method, eps, h, math.nan, math.nan, skipped=True)
        prob = problem_factory(eps)
        n = int(round(T / h))
        tr = integrate(method, prob, h, n * h, stride=n, **method_options)
        x_ref, v_ref = _reference_states(problem_factory, eps, (n * h,), tol)[n * h]
        return ConvergenceRow(method, eps, h, _rel(tr.x[-1], x_ref), _rel(tr.v[-1], v_ref))

    rows = _map(run, grid, workers)
    return ConvergenceTable(method, rows)


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ----------------------------------------------------------------------------
# resonance


@dataclass(frozen=True)
class ResonancePoint:
    method: str
    epsilon: float
    ratio: float
    ratio_times_normB: float
    err_x: float


def default_ratio_grid(n=200, top=4.5 * math.pi):
    """``n`` equally spaced ratios h/eps in (0, top]."""
    return np.linspace(top / n, top, n)


def resonance_scan(method, eps=2.0 ** -10, ratios=None, T=1.0, tol=1e-12,
                   problem_factory=builtin_problem, workers=1, **method_options):
    """Global x-error at t = round(T/h)*h for h = ratio*eps.

    Resonant step sizes that make a coefficient singular, or trajectories
    that blow up, are recorded as ``inf``.
    """
    ratios = default_ratio_grid() if ratios is None else np.asarray(ratios, dtype=float)
    prob = problem_factory(eps)
    normB = prob.spectrum.norm
    steps = [max(1, int(round(T / (r * eps)))) for r in ratios]
    ends = tuple(sorted({n * (r * eps) for n, r in zip(steps, ratios)}))
    refs = _reference_states(problem_factory, eps, ends, tol)

    def run(item):
        r, n = item
        h = r * eps
        try:
            m = make_method(method, prob, h, **method_options)
            tr = integrate(m, prob, h, n * h, stride=n)
            err = _rel(tr.x[-1], refs[n * h][0])
        except (NearSingularCoefficient, NonFinite):
            err = math.inf
        if not math.isfinite(err):
            err = math.inf
        return ResonancePoint(method, eps, float(r), float(r * normB), err)

    return _map(run, list(zip(ratios, steps)), workers)


# ----------------------------------------------------------------------------
# quick certification suite used by the CLI


@dataclass(frozen=True)
class CheckResult:
    check: str
    method: str
    value: float
    threshold: float
    passed: bool


def _upper(check, method, value, threshold):
    return CheckResult(check, method, float(value), threshold, bool(value <= threshold))


def _lower(check, method, value, threshold):
    return CheckResult(check, method, float(value), threshold, bool(value >= threshold))


def random_states(prob, n, seed, radius=2.0):
    """States with |x|, |v| <= radius drawn from a seeded generator."""
    from .model import State

    rng = np.random.default_rng(seed)
    out = []
    d = prob.dim
    for _ in range(n):
        x = rng.uniform(-1, 1, d)
        v = rng.uniform(-1, 1, d)
        x *= radius * rng.uniform() / max(np.linalg.norm(x), 1e-12)
        v *= radius * rng.uniform() / max(np.linalg.norm(v), 1e-12)
        out.append(State(0.0, x, v))
    return out


def certify(methods=METHOD_IDS, seed=42, em1_T=100.0, fp_tol=1e-14, fp_max=10, quad_order=5):
    """Fast structural checks; each result carries its own threshold."""
    from .integrators import step

    results = []
    em1_opts = dict(fp_tol=fp_tol, fp_max=fp_max, quad_order=quad_order)
    ks = (0.5, 1.0, 2.0, math.pi / 2, 3.0, 10.0)

    # phi-function recurrence
    rng = np.random.default_rng(seed)
    z = (rng.normal(size=50) + 1j * rng.normal(size=50)) * 3
    worst = 0.0
    for k in (1, 2, 3):
        lhs = phi_scalar(k, z) * z
        rhs = phi_scalar(k - 1, z) - 1.0 / math.factorial(k - 1)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    results.append(_upper("phi_recurrence", "-", worst, 1e-10))

    for mid in methods:
        if mid in ("M1", "M2", "SM1", "SM2", "SM3"):
            r = eq17_residual(mid, ks)
            if mid in ("SM1", "SM2", "SM3"):
                results.append(_upper("eq17_symplectic_conditions", mid, r.worst, 1e-12))
            elif mid == "M1":
                r1 = eq17_residual(mid, (1.0,))
                results.append(_lower("eq17_violated", mid, max(r1.r2, r1.r3), 1e-3))

    prob = builtin_problem(0.1)
    states = random_states(prob, 3, seed)
    for mid in methods:
        opts = em1_opts if mid == "EM1" else {}
        if mid in ("SM1", "SM2", "SM3"):
            val = max(symplecticity_residual(mid, prob, s, 0.1, **opts) for s in states)
            results.append(_upper("fd_symplecticity", mid, val, 1e-6))
        elif mid == "M1":
            val = symplecticity_residual(mid, prob, prob.initial_state(), 0.1)
            results.append(_lower("fd_symplecticity_violated", mid, val, 1e-3))

    for mid in methods:
        opts = em1_opts if mid == "EM1" else {}
        if mid == "M1":
            p = builtin_problem(0.5)
            val = symmetry_residual(mid, p, p.initial_state(), 0.1)
            results.append(_lower("symmetry_violated", mid, val, 1e-4))
            continue
        if mid == "EM1":
            # far from x0 the capped fixed point may stop short of fp_tol
            val = symmetry_residual(mid, prob, prob.initial_state(), 0.1, **opts)
            thr = 10 * fp_tol
        else:
            val = max(symmetry_residual(mid, prob, s, 0.1, **opts) for s in states)
            thr = 1e-10
        results.append(_upper("symmetry", mid, val, thr))

    lin = linear_problem(0.1, np.eye(2))
    for mid in methods:
        opts = em1_opts if mid == "EM1" else {}
        worst = 0.0
        order = 2 if mid == "M1" else 3
        for h in (0.05, 0.025, 0.0125):
            m = make_method(mid, lin, h, **opts)
            got = step(m, lin.initial_state()).next
            ex = exact_linear_solution(lin, h)
            err = max(np.max(np.abs(got.x - ex.x)), np.max(np.abs(got.v - ex.v)))
            worst = max(worst, err / (10 * h ** order))
        results.append(_upper("linear_one_step_error/10h^p", mid, worst, 1.0))

    if "EM1" in methods and em1_T > 0:
        p = builtin_problem(0.05)
        tr = integrate("EM1", p, 0.05, em1_T, stride=10, **em1_opts)
        results.append(_upper("em1_energy_drift", "EM1", energy_drift(tr).max_abs, 1e-8))
    return results
