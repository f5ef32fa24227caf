"""Problem definitions for x'' = (1/eps) B x' + F(x).

Potentials and forces act on the last axis, so they accept a single point of
shape ``(d,)`` or a batch of shape ``(n, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .spectral import PhiTable, as_skew, skew_spectral

__all__ = [
    "Problem",
    "State",
    "CanonicalState",
    "energy",
    "hamiltonian",
    "to_canonical",
    "from_canonical",
    "check_force",
    "fd_force",
    "builtin_problem",
    "linear_problem",
    "exact_linear_solution",
    "BUILTIN_B",
    "BUILTIN_X0",
    "BUILTIN_V0",
]


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Problem:
    epsilon: float
    B: np.ndarray
    potential: Callable
    force: Callable
    x0: np.ndarray
    v0: np.ndarray
    label: str = ""
    force_jacobian: Optional[Callable] = None
    # K of a linear problem F(x) = -K x; enables the exact flow
    stiffness: Optional[np.ndarray] = None
    check: bool = False

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        object.__setattr__(self, "B", as_skew(self.B))
        object.__setattr__(self, "x0", _frozen(self.x0))
        object.__setattr__(self, "v0", _frozen(self.v0))
        d = self.B.shape[0]
        if self.x0.shape != (d,) or self.v0.shape != (d,):
            raise ValueError("initial data must have the dimension of B")
        if self.stiffness is not None:
            object.__setattr__(self, "stiffness", _frozen(self.stiffness))
        if self.check:
            err = check_force(self)
            if err > 1e-5:
                raise ValueError(f"force is not -grad U (mismatch {err:.3e})")

    @property
    def dim(self):
        return self.B.shape[0]

    @property
    def Omega(self):
        return self.B / self.epsilon

    @cached_property
    def spectrum(self):
        return skew_spectral(self.B)

    def phi_table(self, h):
        """Fresh :class:`PhiTable` for ``h * Omega``."""
        return PhiTable(self.spectrum, h / self.epsilon)

    def initial_state(self):
        return State(0.0, self.x0.copy(), self.v0.copy())


@dataclass(frozen=True)
class State:
    t: float
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v))):
            raise ValueError("state has non-finite entries")


@dataclass(frozen=True)
class CanonicalState:
    x: np.ndarray
    p: np.ndarray


def energy(prob, x, v):
    """E(x, v) = |v|^2 / 2 + U(x)."""
    v = np.asarray(v)
    return 0.5 * np.sum(v * v, axis=-1) + prob.potential(np.asarray(x))


def hamiltonian(prob, x, p):
    """H(x, p) = |p + B x / (2 eps)|^2 / 2 + U(x)."""
    x = np.asarray(x)
    w = np.asarray(p) + (x @ prob.B.T) / (2.0 * prob.epsilon)
    return 0.5 * np.sum(w * w, axis=-1) + prob.potential(x)


def to_canonical(prob, s):
    return CanonicalState(s.x, s.v - (prob.B @ s.x) / (2.0 * prob.epsilon))


def from_canonical(prob, c, t=0.0):
    return State(t, c.x, c.p + (prob.B @ c.x) / (2.0 * prob.epsilon))


def fd_force(potential, step=1e-6):
    """Central-difference force ``-grad U`` for a point potential.

    Accuracy is roughly 1e-8 relative; intended for tests and quick
    experiments, not for the structure-preservation checks.
    """

    def force(x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        out = np.empty_like(flat)
        for n, pt in enumerate(flat):
            hs = step * max(1.0, float(np.max(np.abs(pt))))
            for i in range(pt.size):
                e = np.zeros_like(pt)
                e[i] = hs
                out[n, i] = -(potential(pt + e) - potential(pt - e)) / (2 * hs)
        return out.reshape(x.shape)

    return force


def check_force(prob, n_points=10, seed=0):
    """Max |F(x) + grad_fd U(x)| over random points in the unit ball around x0."""
    rng = np.random.default_rng(seed)
    d = prob.dim
    grad = fd_force(prob.potential)
    worst = 0.0
    for _ in range(n_points):
        u = rng.normal(size=d)
        u *= rng.uniform() ** (1.0 / d) / np.linalg.norm(u)
        x = prob.x0 + u
        worst = max(worst, float(np.max(np.abs(prob.force(x) - grad(x)))))
    return worst


# ----------------------------------------------------------------------------
# built-in charged-particle benchmark (d = 3)

BUILTIN_B = _frozen([[0.0, 0.2, 0.2], [-0.2, 0.0, 1.0], [-0.2, -1.0, 0.0]])
BUILTIN_X0 = _frozen([0.6, 1.0, -1.0])
BUILTIN_V0 = _frozen([-1.0, 0.5, 0.6])


def _quartic_potential(x):
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return x1 * x1 * x1 * (1.0 + x1 / 5) + x2 * x2 * x2 * (x2 - 1.0) + (x3 * x3) * (x3 * x3)


def _quartic_force(x):
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack(
        [-x1 * x1 * (3.0 + 4.0 * x1 / 5), x2 * x2 * (3.0 - 4.0 * x2), -4.0 * x3 * x3 * x3],
        axis=-1,
    )


def _quartic_jacobian(x):
    x1, x2, x3 = x[0], x[1], x[2]
    return np.diag([-6.0 * x1 - 12.0 * x1 * x1 / 5, 6.0 * x2 - 12.0 * x2 * x2, -12.0 * x3 * x3])


def builtin_problem(epsilon=0.05, check=False):
    """The d = 3 charged-particle test problem with quartic potential."""
    return Problem(
        epsilon=epsilon,
        B=BUILTIN_B,
        potential=_quartic_potential,
        force=_quartic_force,
        x0=BUILTIN_X0,
        v0=BUILTIN_V0,
        label=f"builtin(eps={epsilon:g})",
        force_jacobian=_quartic_jacobian,
        check=check,
    )


# ----------------------------------------------------------------------------
# linear oracle problem


def linear_problem(epsilon, K, B=None, x0=None, v0=None):
    """Linear problem with F(x) = -K x; its exact flow is a matrix exponential.

    ``B`` defaults to the rotation generator in the first two coordinates.
    """
    K = np.array(K, dtype=float)
    d = K.shape[0]
    if K.shape != (d, d) or not np.allclose(K, K.T, atol=1e-14):
        raise ValueError("K must be a symmetric square matrix")
    if np.min(np.linalg.eigvalsh(K)) < -1e-12:
        raise ValueError("K must be positive semidefinite")
    if B is None:
        B = np.zeros((d, d))
        B[0, 1], B[1, 0] = 1.0, -1.0
    if x0 is None:
        x0 = np.linspace(1.0, 0.5, d)
    if v0 is None:
        v0 = np.linspace(-1.0, 0.5, d)
    Kf = _frozen(K)

    def potential(x):
        return 0.5 * np.sum((x @ Kf) * x, axis=-1)

    def force(x):
        return -(x @ Kf)

    return Problem(
        epsilon=epsilon,
        B=B,
        potential=potential,
        force=force,
        x0=x0,
        v0=v0,
        label=f"linear(d={d}, eps={epsilon:g})",
        force_jacobian=lambda x: -Kf,
        stiffness=Kf,
    )


def linear_flow_matrix(prob, t):
    """Propagator of (x, v) over time ``t`` for a linear problem."""
    if prob.stiffness is None:
        raise ValueError("exact flow is only available for linear problems")
    d = prob.dim
    A = np.zeros((2 * d, 2 * d))
    A[:d, d:] = np.eye(d)
    A[d:, :d] = -prob.stiffness
    A[d:, d:] = prob.Omega
    return scipy.linalg.expm(t * A)


def exact_linear_solution(prob, t, x0=None, v0=None):
    """Exact state at time ``t`` of a :func:`linear_problem`."""
    x0 = prob.x0 if x0 is None else np.asarray(x0, dtype=float)
    v0 = prob.v0 if v0 is None else np.asarray(v0, dtype=float)
    y = linear_flow_matrix(prob, t) @ np.concatenate([x0, v0])
    d = prob.dim
    return State(float(t), y[:d], y[d:])
