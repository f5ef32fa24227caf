import math

import numpy as np
import pytest

from oscexp import builtin_problem, integrate, linear_problem
from oscexp.integrators import Trajectory
from oscexp.verify import (
    ConvergenceRow,
    ConvergenceTable,
    canonical_map,
    certify,
    convergence_study,
    default_ratio_grid,
    energy_drift,
    eq17_residual,
    exact_flow_symplecticity_residual,
    fit_slope,
    map_symplecticity_residual,
    random_states,
    resonance_scan,
    symmetry_residual,
    symplecticity_residual,
)

KS = (0.5, 1.0, 2.0, math.pi / 2, 3.0, 10.0)


def flat_trajectory(E):
    n = len(E)
    return Trajectory(t=np.arange(n, dtype=float), x=np.zeros((n, 1)), v=np.zeros((n, 1)),
                      E=np.asarray(E, float), stride=1, method="test", h=1.0, epsilon=1.0)


# -- scalar symplecticity conditions ------------------------------------


@pytest.mark.parametrize("mid", ["SM1", "SM2", "SM3"])
def test_eq17_holds_for_symplectic_methods(mid):
    assert eq17_residual(mid, KS).worst <= 1e-12


def test_eq17_fails_for_m1():
    r = eq17_residual("M1", (1.0,))
    assert max(r.r2, r.r3) >= 1e-3
    # the first identity family holds trivially with d = 1
    assert r.r1 <= 1e-15 and abs(r.d[0] - 1) <= 1e-15


def test_eq17_m1_matches_independent_evaluation():
    """r2 for M1 at K = i written out with plain complex arithmetic."""
    K = 1j
    p1 = (np.exp(K) - 1) / K
    p2 = (p1 - 1) / K
    p1b = np.conj(p1)
    ref = abs(p1 * p1b - p2 * (np.exp(-K) + K * p1b))
    assert eq17_residual("M1", (1.0,)).r2 == pytest.approx(ref, rel=1e-12)


def test_eq17_fails_for_m2():
    assert eq17_residual("M2", KS).worst >= 1e-3


def test_eq17_finite_near_zero():
    r = eq17_residual("SM2", (1e-6,))
    assert all(math.isfinite(v) for v in (r.r1, r.r2, r.r3))


def test_eq17_from_bound_spectrum():
    p = builtin_problem(0.1)
    r = eq17_residual("SM3", spec=p.spectrum, h=0.1, eps=0.1)
    assert len(r.samples) == 3 and r.worst <= 1e-12


def test_eq17_rejects_em1():
    with pytest.raises(ValueError):
        eq17_residual("EM1", KS)


# -- finite-difference symplecticity and symmetry ------------------------


def test_identity_map_is_symplectic():
    y = np.array([0.1, 0.2, 0.3, 0.4])
    assert map_symplecticity_residual(lambda z: z.copy(), y) <= 1e-9


def test_shear_map_is_not_symplectic():
    y = np.array([0.1, 0.2])
    assert map_symplecticity_residual(lambda z: np.array([2 * z[0], 2 * z[1]]), y) >= 1.0


def test_canonical_map_lifts_identity():
    p = builtin_problem(0.1)
    g = canonical_map(p, lambda x, v: (x, v))
    y = np.arange(6.0)
    assert np.allclose(g(y), y, atol=1e-14)


def test_exact_linear_flow_is_symplectic():
    lin = linear_problem(0.1, np.diag([1.0, 2.0, 0.5]), B=builtin_problem().B)
    for s in random_states(lin, 3, seed=1):
        assert exact_flow_symplecticity_residual(lin, s, 0.1) <= 1e-6


@pytest.mark.parametrize("mid", ["SM1", "SM2", "SM3"])
def test_sm_methods_fd_symplectic(mid):
    p = builtin_problem(0.1)
    for s in random_states(p, 3, seed=42):
        assert symplecticity_residual(mid, p, s, 0.1) <= 1e-6


@pytest.mark.parametrize("mid", ["M1", "M2"])
def test_non_symplectic_methods_detected(mid):
    p = builtin_problem(0.1)
    assert symplecticity_residual(mid, p, p.initial_state(), 0.1) >= 1e-3


@pytest.mark.parametrize("mid", ["M2", "SM1", "SM2", "SM3"])
def test_symmetric_methods_round_trip(mid):
    p = builtin_problem(0.1)
    for s in random_states(p, 3, seed=7):
        assert symmetry_residual(mid, p, s, 0.1) <= 1e-10


def test_em1_round_trip_at_initial_state():
    p = builtin_problem(0.1)
    assert symmetry_residual("EM1", p, p.initial_state(), 0.1) <= 1e-13


def test_non_symmetric_methods_detected():
    p = builtin_problem(0.5)
    assert symmetry_residual("M1", p, p.initial_state(), 0.1) >= 1e-4
    assert symmetry_residual("SE", p, p.initial_state(), 0.1) >= 1e-4


def test_random_states_radius_and_seed():
    p = builtin_problem(0.1)
    a = random_states(p, 5, seed=3)
    b = random_states(p, 5, seed=3)
    assert all(np.array_equal(s.x, t.x) for s, t in zip(a, b))
    assert all(np.linalg.norm(s.x) <= 2 and np.linalg.norm(s.v) <= 2 for s in a)


# -- energy drift --------------------------------------------------------


def test_constant_energy_gives_zero_drift():
    ds = energy_drift(flat_trajectory([2.0] * 10))
    assert np.all(ds.err == 0) and ds.max_abs == 0 and ds.growth_ratio == 0


def test_drift_relative_error_and_growth():
    ds = energy_drift(flat_trajectory([2.0, 2.002, 2.0, 1.996, 2.0]))
    assert np.allclose(ds.err, [0, 1e-3, 0, -2e-3, 0])
    assert ds.max_abs == pytest.approx(2e-3)
    assert ds.growth_ratio == pytest.approx(2.0)


def test_drift_needs_two_samples():
    with pytest.raises(ValueError):
        energy_drift(flat_trajectory([1.0]))


def test_em1_energy_drift_small():
    p = builtin_problem(0.05)
    tr = integrate("EM1", p, 0.05, 50.0, stride=10)
    assert energy_drift(tr).max_abs <= 1e-8


# -- convergence ---------------------------------------------------------


def test_fit_slope_exact_power_law():
    h = 2.0 ** -np.arange(6, 11)
    assert fit_slope(h, 3 * h ** 2) == pytest.approx(2.0, abs=1e-12)


def test_fit_slope_ignores_non_finite():
    assert fit_slope([1, 0.5, 0.25], [1, math.nan, 1 / 16]) == pytest.approx(2.0)
    assert math.isnan(fit_slope([1.0], [1.0]))


def test_convergence_table_helpers():
    rows = [ConvergenceRow("X", e, h, e * h, h, False) for e in (0.1, 0.2) for h in (0.1, 0.05)]
    rows.append(ConvergenceRow("X", 0.01, 0.1, math.nan, math.nan, True))
    t = ConvergenceTable("X", rows)
    assert t.epsilons == [0.01, 0.1, 0.2]
    assert t.slope_x(0.1) == pytest.approx(1.0)
    assert t.spread_x()[0.05] == pytest.approx(2.0)
    assert t.uniform_err_x()[0.1] == pytest.approx(0.02)


def test_convergence_study_skips_large_steps():
    t = convergence_study("M2", [2.0 ** -7], range(6, 9))
    skipped = [r.h for r in t.rows if r.skipped]
    assert skipped == [2.0 ** -6]
    assert t.slope_x(2.0 ** -7) == pytest.approx(2.0, abs=0.3)


def test_convergence_study_threads_match_serial():
    a = convergence_study("SM1", [2.0 ** -4], range(6, 9))
    b = convergence_study("SM1", [2.0 ** -4], range(6, 9), workers=3)
    assert [r.err_x for r in a.rows] == [r.err_x for r in b.rows]


def test_convergence_study_rejects_long_horizon():
    with pytest.raises(ValueError):
        convergence_study("SM1", [0.1], T=2.0)


# -- resonance -----------------------------------------------------------


def test_default_ratio_grid():
    g = default_ratio_grid()
    assert len(g) == 200 and g[-1] == pytest.approx(4.5 * math.pi) and g[0] > 0


def test_resonance_scan_small_ratios_consistent():
    pts = resonance_scan("SM1", 2.0 ** -6, ratios=[0.5, 1.0], T=0.5)
    assert [p.ratio for p in pts] == [0.5, 1.0]
    assert pts[0].err_x < pts[1].err_x < 1e-2
    assert pts[1].ratio_times_normB == pytest.approx(math.sqrt(1.08))


def test_resonance_scan_marks_singular_step():
    p = builtin_problem(2.0 ** -6)
    r = 2 * math.pi / p.spectrum.norm
    pts = resonance_scan("M2", 2.0 ** -6, ratios=[r], T=0.5)
    assert pts[0].err_x == math.inf


# -- certification -------------------------------------------------------


def test_certify_all_pass():
    results = certify(em1_T=20.0)
    failed = [r for r in results if not r.passed]
    assert not failed, failed
    checks = {(r.check, r.method) for r in results}
    assert ("symmetry", "EM1") in checks and ("em1_energy_drift", "EM1") in checks
