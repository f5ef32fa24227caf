"""Adaptive exponential integrators for x'' = (1/eps) B x' + F(x).

Every explicit method is an instance of the s-stage scheme

    X_i     = x_n + c_i h phi_1(c_i h Omega) v_n + h^2 sum_j alpha_ij F(X_j)
    x_{n+1} = x_n + h phi_1(h Omega) v_n + h^2 sum_i beta_i F(X_i)
    v_{n+1} = exp(h Omega) v_n + h sum_i gamma_i F(X_i)

with coefficients that are matrix functions of ``h Omega``.  EM1 is the
energy-preserving continuous-stage method solved by fixed-point iteration,
and SE is a symplectic-Euler baseline on the canonical (x, p) form.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import NonFinite, StepSizeUnderflow
from .model import State, energy
from .spectral import matfun, phi_matrix, phi_scalar

log = logging.getLogger(__name__)

__all__ = [
    "METHOD_IDS",
    "BASELINE_IDS",
    "RKTableau",
    "TABLEAUX",
    "MethodSpec",
    "StepReport",
    "Trajectory",
    "rk_to_aei",
    "scalar_coefficients",
    "make_method",
    "aei_step",
    "em1_step",
    "step",
    "integrate",
    "reference_solve",
]

METHOD_IDS = ("M1", "M2", "SM1", "SM2", "SM3", "EM1")
BASELINE_IDS = ("SE",)

EM1_QUAD_ORDER = 5
EM1_FP_TOL = 1e-14
EM1_FP_MAX = 10

_LARGE_X = 1e3


@dataclass(frozen=True)
class RKTableau:
    """Diagonally implicit Runge-Kutta tableau (only a_ij with j <= i used)."""

    c: tuple
    A: tuple
    b: tuple

    def __post_init__(self):
        s = len(self.c)
        A = np.asarray(self.A, dtype=float)
        if A.shape != (s, s) or len(self.b) != s:
            raise ValueError("inconsistent tableau shapes")
        if np.any(np.triu(A, 1) != 0):
            raise ValueError("tableau must be lower triangular")
        if abs(sum(self.b) - 1.0) > 1e-14:
            raise ValueError("weights must sum to one")

    @property
    def stages(self):
        return len(self.c)

    def symplecticity_residual(self):
        """max |b_i a_ij + b_j a_ji - b_i b_j|."""
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float)
        M = b[:, None] * A + (b[:, None] * A).T - np.outer(b, b)
        return float(np.max(np.abs(M)))


# The diagonal entries never enter the exponential scheme (they are multiplied
# by c_i - c_i = 0); they are set to b_i/2 so each tableau is RK-symplectic.
TABLEAUX = {
    "SM1": RKTableau(c=(0.5,), A=((0.5,),), b=(1.0,)),
    "SM2": RKTableau(c=(0.0, 1.0), A=((0.25, 0.0), (0.5, 0.25)), b=(0.5, 0.5)),
    "SM3": RKTableau(c=(0.25, 0.75), A=((0.25, 0.0), (0.5, 0.25)), b=(0.5, 0.5)),
}

_FLAGS = {
    # (symmetric, symplectic, energy_preserving)
    "M1": (False, False, False),
    "M2": (True, False, False),
    "SM1": (True, True, False),
    "SM2": (True, True, False),
    "SM3": (True, True, False),
    "EM1": (True, False, True),
    "SE": (False, True, False),
}


@dataclass(eq=False)
class MethodSpec:
    """A one-step method with all coefficient matrices bound to (problem, h)."""

    id: str
    problem: object
    h: float
    stages: int
    c: np.ndarray
    alpha: Optional[np.ndarray]  # (s, s, d, d)
    beta: Optional[np.ndarray]  # (s, d, d)
    gamma: Optional[np.ndarray]  # (s, d, d)
    exp_hOmega: np.ndarray
    phi1_hOmega: np.ndarray
    stage_propagators: Optional[np.ndarray]  # (s, d, d): c_i h phi_1(c_i h Omega)
    symmetric: bool
    symplectic: bool
    energy_preserving: bool
    phi2_hOmega: Optional[np.ndarray] = None
    quad_nodes: Optional[np.ndarray] = None
    quad_weights: Optional[np.ndarray] = None
    fp_tol: float = EM1_FP_TOL
    fp_max: int = EM1_FP_MAX
    _pre: dict = field(default_factory=dict, repr=False)

    @property
    def continuous_stage(self):
        return self.id == "EM1"

    @property
    def explicit(self):
        return self.id in ("M1", "M2", "SM1", "SM2", "SM3")

    def __post_init__(self):
        h = self.h
        pre = self._pre
        pre["hphi1"] = h * self.phi1_hOmega
        if self.explicit:
            s = self.stages
            pre["alpha"] = [
                [(j, h * h * self.alpha[i, j]) for j in range(s) if np.any(self.alpha[i, j])]
                for i in range(s)
            ]
            pre["beta"] = [(i, h * h * self.beta[i]) for i in range(s) if np.any(self.beta[i])]
            pre["gamma"] = [(i, h * self.gamma[i]) for i in range(s) if np.any(self.gamma[i])]
        elif self.id == "EM1":
            pre["h2phi2"] = h * h * self.phi2_hOmega
        for name in ("alpha", "beta", "gamma", "exp_hOmega", "phi1_hOmega", "phi2_hOmega"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise NonFinite(f"{self.id}: coefficient {name} is not finite")


@dataclass(frozen=True)
class StepReport:
    next: State
    fp_iterations: int = 0
    fp_converged: bool = True
    fp_residual: float = 0.0


@dataclass(eq=False)
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    E: np.ndarray
    stride: int
    method: str
    h: float
    epsilon: float
    fp_failures: int = 0
    completed: bool = True

    def __len__(self):
        return len(self.t)

    @property
    def final(self):
        return State(float(self.t[-1]), self.x[-1], self.v[-1])

    def samples(self):
        return list(zip(self.t, self.x, self.v, self.E))


# ----------------------------------------------------------------------------
# coefficient construction


def rk_to_aei(tab, spec=None, h=None, eps=None, table=None):
    """Exponential coefficients induced by a diagonally implicit RK tableau.

    alpha_ij = a_ij (c_i - c_j) phi_1((c_i - c_j) h Omega)
    beta_i   = b_i (1 - c_i) phi_1((1 - c_i) h Omega)
    gamma_i  = b_i exp((1 - c_i) h Omega)

    Pass either a ready :class:`~oscexp.spectral.PhiTable` or
    ``(spec, h, eps)``.
    """
    if table is None:
        from .spectral import PhiTable

        table = PhiTable(spec, h / eps)
    s = tab.stages
    d = table.spectrum.dim
    c, A, b = tab.c, tab.A, tab.b
    alpha = np.zeros((s, s, d, d))
    for i in range(s):
        for j in range(i):
            dc = c[i] - c[j]
            if A[i][j] != 0.0 and dc != 0.0:
                alpha[i, j] = A[i][j] * dc * phi_matrix(table, 1, dc)
    beta = np.stack([b[i] * (1.0 - c[i]) * phi_matrix(table, 1, 1.0 - c[i]) for i in range(s)])
    gamma = np.stack([b[i] * phi_matrix(table, 0, 1.0 - c[i]) for i in range(s)])
    return alpha, beta, gamma


def _phi(k, z):
    return phi_scalar(k, z)


def scalar_coefficients(method_id, K):
    """Scalar coefficient functions of a method at a complex argument ``K``.

    Returns ``(c, alpha, beta, gamma)`` with ``alpha`` of shape (s, s) and
    ``beta``, ``gamma`` of shape (s,).  These are the same functions that
    :func:`make_method` applies to ``h Omega`` through its spectrum.
    """
    K = complex(K)
    if method_id == "M1":
        c = np.array([0.0])
        alpha = np.zeros((1, 1), complex)
        beta = np.array([_phi(2, K)])
        gamma = np.array([_phi(1, K)])
    elif method_id == "M2":
        c = np.array([0.0, 1.0])
        alpha = np.zeros((2, 2), complex)
        alpha[1, 0] = _phi(2, K)
        beta = np.array([_phi(2, K), 0.0], complex)
        gamma = np.array(
            [_phi(2, K) / _phi(1, -K), np.exp(K) * _phi(2, -K) / _phi(1, K)], complex
        )
    elif method_id in TABLEAUX:
        tab = TABLEAUX[method_id]
        s = tab.stages
        c = np.array(tab.c)
        alpha = np.zeros((s, s), complex)
        for i in range(s):
            for j in range(i):
                dc = c[i] - c[j]
                alpha[i, j] = tab.A[i][j] * dc * _phi(1, dc * K)
        beta = np.array([tab.b[i] * (1 - c[i]) * _phi(1, (1 - c[i]) * K) for i in range(s)])
        gamma = np.array([tab.b[i] * np.exp((1 - c[i]) * K) for i in range(s)])
    else:
        raise ValueError(f"{method_id} has no s-stage coefficient functions")
    return c, alpha, beta, gamma


def _m2_coefficients(table, d):
    phi2 = phi_matrix(table, 2, 1.0)
    alpha = np.zeros((2, 2, d, d))
    alpha[1, 0] = phi2
    beta = np.stack([phi2, np.zeros((d, d))])
    g1 = matfun(table, lambda z: _phi(2, z), 1.0, denominator=lambda z: _phi(1, -z))
    g2 = matfun(
        table, lambda z: np.exp(z) * _phi(2, -z), 1.0, denominator=lambda z: _phi(1, z)
    )
    return alpha, beta, np.stack([g1, g2])


def make_method(method_id, prob, h, quad_order=EM1_QUAD_ORDER, fp_tol=EM1_FP_TOL,
                fp_max=EM1_FP_MAX):
    """Bind a method to ``(prob, h)``, precomputing every coefficient matrix.

    ``h`` may be negative (used for adjoint/symmetry checks).  Raises
    :class:`~oscexp.errors.NearSingularCoefficient` when M2 sits on a
    step-size resonance.
    """
    if method_id not in METHOD_IDS + BASELINE_IDS:
        raise ValueError(f"unknown method {method_id!r}")
    if h == 0 or not math.isfinite(h):
        raise ValueError("step size must be finite and non-zero")
    table = prob.phi_table(h)
    d = prob.dim
    E = phi_matrix(table, 0, 1.0)
    P1 = phi_matrix(table, 1, 1.0)
    sym, sympl, ep = _FLAGS[method_id]
    common = dict(
        id=method_id, problem=prob, h=h, exp_hOmega=E, phi1_hOmega=P1,
        symmetric=sym, symplectic=sympl, energy_preserving=ep,
    )

    if method_id == "EM1":
        if quad_order < 2:
            raise ValueError("quad_order must be at least 2")
        if fp_tol <= 0:
            raise ValueError("fp_tol must be positive")
        nodes, weights = np.polynomial.legendre.leggauss(quad_order)
        return MethodSpec(
            stages=quad_order, c=np.array([0.0, 1.0]), alpha=None, beta=None, gamma=None,
            stage_propagators=None, phi2_hOmega=phi_matrix(table, 2, 1.0),
            quad_nodes=0.5 * (nodes + 1.0), quad_weights=0.5 * weights,
            fp_tol=fp_tol, fp_max=fp_max, **common,
        )
    if method_id == "SE":
        return MethodSpec(
            stages=1, c=np.array([0.0]), alpha=None, beta=None, gamma=None,
            stage_propagators=None, **common,
        )

    if method_id == "M1":
        c = np.array([0.0])
        alpha = np.zeros((1, 1, d, d))
        beta = phi_matrix(table, 2, 1.0)[None]
        gamma = P1[None]
    elif method_id == "M2":
        c = np.array([0.0, 1.0])
        alpha, beta, gamma = _m2_coefficients(table, d)
    else:
        tab = TABLEAUX[method_id]
        c = np.array(tab.c)
        alpha, beta, gamma = rk_to_aei(tab, table=table)
    props = np.stack([ci * h * phi_matrix(table, 1, ci) for ci in c])
    return MethodSpec(
        stages=len(c), c=c, alpha=alpha, beta=beta, gamma=gamma,
        stage_propagators=props, **common,
    )


# ----------------------------------------------------------------------------
# stepping kernels on raw arrays


def _aei_kernel(m, x, v):
    F = m.problem.force
    pre = m._pre
    forces = []
    for i in range(m.stages):
        X = x + m.stage_propagators[i] @ v
        for j, a in pre["alpha"][i]:
            X = X + a @ forces[j]
        forces.append(F(X))
    x1 = x + pre["hphi1"] @ v
    for i, b in pre["beta"]:
        x1 = x1 + b @ forces[i]
    v1 = m.exp_hOmega @ v
    for i, g in pre["gamma"]:
        v1 = v1 + g @ forces[i]
    return x1, v1, 0, True, 0.0


def _em1_kernel(m, x, v):
    F = m.problem.force
    pre = m._pre
    sig = m.quad_nodes[:, None]
    w = m.quad_weights
    base = x + pre["hphi1"] @ v
    x1 = base
    incr = math.inf
    iters = 0
    converged = False
    while iters < m.fp_max:
        avg = w @ F(x + sig * (x1 - x))
        new = base + pre["h2phi2"] @ avg
        incr = float(np.max(np.abs(new - x1)))
        x1 = new
        iters += 1
        if incr <= m.fp_tol:
            converged = True
            break
    avg = w @ F(x + sig * (x1 - x))
    v1 = m.exp_hOmega @ v + pre["hphi1"] @ avg
    return x1, v1, iters, converged, incr


def _se_kernel(m, x, v):
    pre = m._pre
    if "solve" not in pre:
        prob, h = m.problem, m.h
        S = prob.B / (2.0 * prob.epsilon)
        pre["S"] = S
        pre["hS2"] = h * (S @ S)
        pre["solve"] = np.linalg.inv(np.eye(prob.dim) - h * S)
    S = pre["S"]
    h = m.h
    Sx = S @ x
    p = v - Sx
    p1 = pre["solve"] @ (p + pre["hS2"] @ x + h * m.problem.force(x))
    x1 = x + h * (p1 + Sx)
    v1 = p1 + S @ x1
    return x1, v1, 0, True, 0.0


_KERNELS = {"EM1": _em1_kernel, "SE": _se_kernel}


def _kernel(m):
    return _KERNELS.get(m.id, _aei_kernel)


def _check_finite(m, x1, v1):
    if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(v1))):
        raise NonFinite(f"{m.id}: non-finite state at h = {m.h:g}")


def _report(m, s, out):
    x1, v1, iters, conv, resid = out
    _check_finite(m, x1, v1)
    return StepReport(State(s.t + m.h, x1, v1), iters, conv, resid)


def aei_step(m, prob=None, s=None, h=None):
    """One step of an explicit s-stage method (M1, M2, SM1-SM3)."""
    if not m.explicit:
        raise ValueError(f"{m.id} is not an explicit s-stage method")
    _check_binding(m, prob, h)
    return _report(m, s, _aei_kernel(m, s.x, s.v))


def em1_step(prob, s, h, quad_order=EM1_QUAD_ORDER, fp_tol=EM1_FP_TOL, fp_max=EM1_FP_MAX,
             method=None):
    """One EM1 step; ``method`` may supply a prebuilt spec to skip setup."""
    m = method if method is not None else make_method(
        "EM1", prob, h, quad_order=quad_order, fp_tol=fp_tol, fp_max=fp_max)
    _check_binding(m, prob, h)
    return _report(m, s, _em1_kernel(m, s.x, s.v))


def step(m, s):
    """Advance a :class:`State` by one step of any bound method."""
    return _report(m, s, _kernel(m)(m, s.x, s.v))


def _check_binding(m, prob, h):
    if prob is not None and prob is not m.problem:
        raise ValueError("method is bound to a different problem")
    if h is not None and h != m.h:
        raise ValueError("method is bound to a different step size")


# ----------------------------------------------------------------------------
# trajectories


def integrate(method, prob, h, T, stride=1, state=None, **method_options):
    """Run ``round(T/h)`` steps, recording every ``stride``-th state.

    ``method`` is a method id or a :class:`MethodSpec` bound to
    ``(prob, h)``.  On a non-finite state, :class:`NonFinite` is raised with
    the partial trajectory attached.
    """
    if T <= 0 or h <= 0 or h > T * (1 + 1e-12):
        raise ValueError("need 0 < h <= T")
    m = method if isinstance(method, MethodSpec) else make_method(method, prob, h, **method_options)
    _check_binding(m, prob, h)
    n = int(round(T / h))
    if stride < 1:
        raise ValueError("stride must be positive")
    kernel = _kernel(m)
    x = (prob.x0 if state is None else state.x).astype(float).copy()
    v = (prob.v0 if state is None else state.v).astype(float).copy()
    t0 = 0.0 if state is None else state.t
    n_rec = n // stride + 1
    d = prob.dim
    ts = np.empty(n_rec)
    xs = np.empty((n_rec, d))
    vs = np.empty((n_rec, d))
    ts[0], xs[0], vs[0] = t0, x, v
    fp_failures = 0
    warned = False
    r = 1

    def traj(rows, completed):
        return Trajectory(
            t=ts[:rows].copy(), x=xs[:rows].copy(), v=vs[:rows].copy(),
            E=np.asarray(energy(prob, xs[:rows], vs[:rows])),
            stride=stride, method=m.id, h=h, epsilon=prob.epsilon,
            fp_failures=fp_failures, completed=completed,
        )

    # overflow is reported through NonFinite below
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, n + 1):
            x, v, _, conv, _ = kernel(m, x, v)
            if not conv:
                fp_failures += 1
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
                raise NonFinite(f"{m.id}: non-finite state at step {k}", partial=traj(r, False))
            if not warned and np.max(np.abs(x)) > _LARGE_X:
                log.warning("%s: |x| exceeded %g at t = %g", m.id, _LARGE_X, t0 + k * h)
                warned = True
            if k % stride == 0:
                ts[r], xs[r], vs[r] = t0 + k * h, x, v
                r += 1
    if fp_failures:
        log.info("%s: fixed point hit the iteration cap in %d steps", m.id, fp_failures)
    return traj(r, True)


def reference_solve(prob, T, tol=1e-12, t_eval=None, x0=None, v0=None):
    """High-accuracy solution of the first-order system by an adaptive RK pair.

    Uses the Dormand-Prince 8(5,3) pair with ``rtol = atol = tol``.  Returns
    a :class:`Trajectory` sampled at ``t_eval`` (default ``[0, T]``).
    """
    if not (1e-13 <= tol <= 1e-6):
        raise ValueError("tol must lie in [1e-13, 1e-6]")
    d = prob.dim
    Om = prob.Omega
    F = prob.force

    def rhs(t, y):
        x, v = y[:d], y[d:]
        return np.concatenate([v, Om @ v + F(x)])

    t_eval = np.array([0.0, T] if t_eval is None else t_eval, dtype=float)
    x0 = prob.x0 if x0 is None else np.asarray(x0, float)
    v0 = prob.v0 if v0 is None else np.asarray(v0, float)
    sol = solve_ivp(rhs, (0.0, T), np.concatenate([x0, v0]), method="DOP853",
                    rtol=tol, atol=tol, t_eval=t_eval)
    if sol.status != 0:
        raise StepSizeUnderflow(f"reference solver failed: {sol.message}")
    xs, vs = sol.y[:d].T.copy(), sol.y[d:].T.copy()
    return Trajectory(
        t=sol.t.copy(), x=xs, v=vs, E=np.asarray(energy(prob, xs, vs)),
        stride=1, method="reference", h=float("nan"), epsilon=prob.epsilon,
    )
