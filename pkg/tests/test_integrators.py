import math

import numpy as np
import pytest
import scipy.linalg

from oscexp import (
    METHOD_IDS,
    NearSingularCoefficient,
    NonFinite,
    Problem,
    State,
    TABLEAUX,
    builtin_problem,
    em1_step,
    energy,
    exact_linear_solution,
    integrate,
    linear_problem,
    make_method,
    reference_solve,
    rk_to_aei,
    step,
)
from oscexp.integrators import aei_step, scalar_coefficients
from oscexp.spectral import phi_matrix
from oscexp.verify import fit_slope

EXPLICIT = ("M1", "M2", "SM1", "SM2", "SM3")
ALL = METHOD_IDS + ("SE",)


def constant_force_problem(eps, F0, B):
    F0 = np.asarray(F0, float)
    d = F0.size
    return Problem(eps, B, lambda x: -(x @ F0), lambda x: np.broadcast_to(F0, np.shape(x)).copy(),
                   np.linspace(0.5, -0.5, d), np.linspace(1.0, 0.2, d))


def constant_force_exact(prob, F0, h):
    """Exact flow of x'' = Omega x' + F0 via an augmented matrix exponential."""
    d = prob.dim
    A = np.zeros((2 * d + 1, 2 * d + 1))
    A[:d, d:2 * d] = np.eye(d)
    A[d:2 * d, d:2 * d] = prob.Omega
    A[d:2 * d, -1] = F0
    y = scipy.linalg.expm(h * A) @ np.concatenate([prob.x0, prob.v0, [1.0]])
    return y[:d], y[d:2 * d]


def counting(prob):
    calls = [0]

    def force(x):
        calls[0] += 1
        return prob.force(x)

    q = Problem(prob.epsilon, prob.B, prob.potential, force, prob.x0, prob.v0)
    return q, calls


# -- coefficient construction ------------------------------------------


def test_tableaux_satisfy_rk_symplecticity_identity():
    for tab in TABLEAUX.values():
        assert tab.symplecticity_residual() <= 1e-15


def test_sm1_coefficients_at_zero_frequency():
    p = builtin_problem(0.05)
    m = make_method("SM1", linear_problem(1.0, np.eye(3), B=np.zeros((3, 3))), 0.1)
    assert np.allclose(m.alpha, 0)
    assert np.allclose(m.beta[0], 0.5 * np.eye(3))
    assert np.allclose(m.gamma[0], np.eye(3))
    m = make_method("SM1", p, 0.05)
    table = p.phi_table(0.05)
    assert np.allclose(m.beta[0], 0.5 * phi_matrix(table, 1, 0.5), atol=1e-15)
    assert np.allclose(m.gamma[0], phi_matrix(table, 0, 0.5), atol=1e-15)


def test_sm3_alpha21():
    p = builtin_problem(0.05)
    m = make_method("SM3", p, 0.05)
    ref = 0.25 * phi_matrix(p.phi_table(0.05), 1, 0.5)
    assert np.allclose(m.alpha[1, 0], ref, atol=1e-15)
    assert np.allclose(m.alpha[0, 1], 0) and np.allclose(m.alpha[0, 0], 0)


@pytest.mark.parametrize("mid", EXPLICIT)
def test_gamma_sums_to_identity_at_zero_frequency(mid):
    _, _, _, gamma = scalar_coefficients(mid, 0.0)
    assert abs(gamma.sum() - 1.0) <= 1e-15


@pytest.mark.parametrize("mid", EXPLICIT)
def test_matrix_coefficients_are_spectral_images(mid):
    p = builtin_problem(0.05)
    h = 0.07
    m = make_method(mid, p, h)
    sp = p.spectrum
    per_eig = [scalar_coefficients(mid, 1j * (h / p.epsilon) * w) for w in sp.omegas]
    for i in range(m.stages):
        g = sp.assemble(np.array([c[3][i] for c in per_eig])).real
        b = sp.assemble(np.array([c[2][i] for c in per_eig])).real
        assert np.allclose(m.gamma[i], g, atol=1e-14)
        assert np.allclose(m.beta[i], b, atol=1e-14)
        for j in range(m.stages):
            a = sp.assemble(np.array([c[1][i, j] for c in per_eig])).real
            assert np.allclose(m.alpha[i, j], a, atol=1e-14)


def test_rk_to_aei_scalar_path():
    tab = TABLEAUX["SM2"]
    p = builtin_problem(0.1)
    alpha, beta, gamma = rk_to_aei(tab, spec=p.spectrum, h=0.1, eps=0.1)
    m = make_method("SM2", p, 0.1)
    assert np.allclose(alpha, m.alpha) and np.allclose(beta, m.beta)
    assert np.allclose(gamma, m.gamma)


def test_unknown_method_rejected(prob):
    with pytest.raises(ValueError):
        make_method("RK4", prob, 0.1)


def test_zero_step_rejected(prob):
    with pytest.raises(ValueError):
        make_method("SM1", prob, 0.0)


def test_flags():
    p = builtin_problem(0.1)
    flags = {mid: make_method(mid, p, 0.1) for mid in ALL}
    assert [mid for mid, m in flags.items() if m.symplectic] == ["SM1", "SM2", "SM3", "SE"]
    assert [mid for mid, m in flags.items() if m.energy_preserving] == ["EM1"]
    assert not flags["M1"].symmetric and flags["M2"].symmetric
    assert flags["EM1"].continuous_stage and not flags["EM1"].explicit


def test_m2_resonance_raises():
    # (h/eps) * omega = 2 pi hits a zero of phi_1
    lin = linear_problem(0.1, np.eye(2), B=np.array([[0.0, 1.0], [-1.0, 0.0]]))
    with pytest.raises(NearSingularCoefficient):
        make_method("M2", lin, 0.2 * math.pi)
    make_method("SM1", lin, 0.2 * math.pi)


# -- single steps -------------------------------------------------------


@pytest.mark.parametrize("mid", ALL)
def test_free_flight_is_exact(mid):
    p = Problem(0.3, np.zeros((3, 3)), lambda x: 0.0 * x[..., 0], np.zeros_like,
                np.array([1.0, 2.0, 3.0]), np.array([0.5, -0.5, 1.5]))
    s = step(make_method(mid, p, 0.25), p.initial_state()).next
    assert np.allclose(s.x, p.x0 + 0.25 * p.v0, atol=1e-15)
    assert np.allclose(s.v, p.v0, atol=1e-15)
    assert s.t == 0.25


@pytest.mark.parametrize("mid", ["M1", "M2", "EM1"])
def test_constant_force_is_exact(mid):
    F0 = np.array([0.3, -1.0, 2.0])
    p = constant_force_problem(0.1, F0, builtin_problem().B)
    for h in (0.05, 0.3):
        s = step(make_method(mid, p, h), p.initial_state()).next
        x, v = constant_force_exact(p, F0, h)
        assert np.allclose(s.x, x, atol=1e-14) and np.allclose(s.v, v, atol=1e-14)


def test_m1_zero_frequency_update():
    p = builtin_problem(0.05)
    q = Problem(1.0, np.zeros((3, 3)), p.potential, p.force, p.x0, p.v0)
    h = 0.1
    s = step(make_method("M1", q, h), q.initial_state()).next
    F = p.force(p.x0)
    assert np.allclose(s.x, p.x0 + h * p.v0 + 0.5 * h * h * F, atol=1e-15)
    assert np.allclose(s.v, p.v0 + h * F, atol=1e-15)


@pytest.mark.parametrize("mid,calls", [("M1", 1), ("M2", 2), ("SM1", 1), ("SM2", 2),
                                       ("SM3", 2), ("SE", 1)])
def test_force_evaluations_per_step(mid, calls):
    q, n = counting(builtin_problem(0.05))
    m = make_method(mid, q, 0.05)
    n[0] = 0
    step(m, q.initial_state())
    assert n[0] == calls


def test_em1_force_evaluations_follow_iterations():
    q, n = counting(builtin_problem(0.05))
    m = make_method("EM1", q, 0.05)
    n[0] = 0
    r = step(m, q.initial_state())
    assert r.fp_converged and r.fp_residual <= 1e-14
    assert n[0] == r.fp_iterations + 1


def test_em1_linear_matches_direct_solve():
    """For F = -K x the quadrature is exact and the fixed point is a linear solve."""
    K = np.diag([1.0, 2.0, 0.5])
    lin = linear_problem(0.1, K, B=builtin_problem().B)
    h = 0.1
    table = lin.phi_table(h)
    P1, P2, E = (phi_matrix(table, k) for k in (1, 2, 0))
    x0, v0 = lin.x0, lin.v0
    base = x0 + h * P1 @ v0
    x1 = np.linalg.solve(np.eye(3) + 0.5 * h * h * P2 @ K, base - 0.5 * h * h * P2 @ K @ x0)
    v1 = E @ v0 - 0.5 * h * P1 @ K @ (x0 + x1)
    r = em1_step(lin, lin.initial_state(), h)
    assert np.allclose(r.next.x, x1, atol=1e-14)
    assert np.allclose(r.next.v, v1, atol=1e-14)


def test_em1_unforced_converges_immediately():
    p = Problem(0.1, builtin_problem().B, lambda x: 0.0 * x[..., 0], np.zeros_like,
                np.ones(3), np.ones(3))
    r = em1_step(p, p.initial_state(), 0.1)
    assert r.fp_iterations == 1 and r.fp_converged


def test_em1_iteration_cap_reported():
    p = builtin_problem(0.05)
    r = em1_step(p, p.initial_state(), 0.05, fp_tol=1e-30, fp_max=3)
    assert not r.fp_converged and r.fp_iterations == 3


def test_em1_parameters_validated(prob):
    with pytest.raises(ValueError):
        make_method("EM1", prob, 0.05, quad_order=1)
    with pytest.raises(ValueError):
        make_method("EM1", prob, 0.05, fp_tol=0.0)


def test_aei_step_binding_checks(prob):
    m = make_method("SM1", prob, 0.05)
    aei_step(m, prob, prob.initial_state(), 0.05)
    with pytest.raises(ValueError):
        aei_step(m, prob, prob.initial_state(), 0.1)
    with pytest.raises(ValueError):
        aei_step(make_method("EM1", prob, 0.05), s=prob.initial_state())


@pytest.mark.parametrize("mid", ALL)
def test_step_is_deterministic(mid, prob):
    m = make_method(mid, prob, 0.05)
    a = step(m, prob.initial_state()).next
    b = step(make_method(mid, prob, 0.05), prob.initial_state()).next
    assert np.array_equal(a.x, b.x) and np.array_equal(a.v, b.v)


@pytest.mark.parametrize("mid", ALL)
def test_local_error_order_without_magnetic_field(mid):
    p = builtin_problem(1.0)
    q = Problem(1.0, np.zeros((3, 3)), p.potential, p.force, 0.5 * p.x0, 0.5 * p.v0)
    hs = [0.04, 0.02, 0.01, 0.005]
    errs = []
    for h in hs:
        s = step(make_method(mid, q, h), q.initial_state()).next
        ref = reference_solve(q, h, tol=1e-13)
        errs.append(max(np.max(np.abs(s.x - ref.x[-1])), np.max(np.abs(s.v - ref.v[-1]))))
    expected = 2 if mid in ("M1", "SE") else 3
    assert fit_slope(hs, errs) == pytest.approx(expected, abs=0.25)


@pytest.mark.parametrize("mid", METHOD_IDS)
def test_linear_one_step_error(mid, lin):
    order = 2 if mid == "M1" else 3
    for h in (0.05, 0.025, 0.0125):
        s = step(make_method(mid, lin, h), lin.initial_state()).next
        ex = exact_linear_solution(lin, h)
        err = max(np.max(np.abs(s.x - ex.x)), np.max(np.abs(s.v - ex.v)))
        assert err <= 10 * h ** order


# -- trajectories -------------------------------------------------------


def test_integrate_stride_records_endpoints(prob):
    tr = integrate("SM1", prob, 0.05, 1.0, stride=20)
    assert len(tr) == 2
    assert tr.t[0] == 0.0 and tr.t[-1] == pytest.approx(1.0)
    assert tr.final.t == pytest.approx(1.0)


def test_integrate_sample_spacing(prob):
    tr = integrate("M2", prob, 0.05, 1.0, stride=4)
    assert np.allclose(np.diff(tr.t), 0.2)
    assert np.allclose(tr.E, energy(prob, tr.x, tr.v))
    assert len(tr.samples()) == len(tr)


def test_integrate_matches_repeated_steps(prob):
    m = make_method("SM2", prob, 0.05)
    s = prob.initial_state()
    for _ in range(10):
        s = step(m, s).next
    tr = integrate(m, prob, 0.05, 0.5, stride=10)
    assert np.array_equal(tr.x[-1], s.x) and np.array_equal(tr.v[-1], s.v)


def test_integrate_deterministic(prob):
    a = integrate("EM1", prob, 0.05, 2.0)
    b = integrate("EM1", prob, 0.05, 2.0)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.E, b.E)


def test_integrate_from_given_state(prob):
    s = State(1.0, prob.x0, prob.v0)
    tr = integrate("SM1", prob, 0.05, 0.5, state=s)
    assert tr.t[0] == 1.0 and tr.t[-1] == pytest.approx(1.5)


def test_m2_tracks_reference(prob):
    tr = integrate("M2", prob, 0.05, 1.0, stride=20)
    ref = reference_solve(prob, 1.0)
    assert np.max(np.abs(tr.x[-1] - ref.x[-1])) <= 2e-3


def test_integrate_argument_checks(prob):
    with pytest.raises(ValueError):
        integrate("SM1", prob, 0.5, 0.1)
    with pytest.raises(ValueError):
        integrate("SM1", prob, 0.05, 1.0, stride=0)
    with pytest.raises(ValueError):
        integrate(make_method("SM1", prob, 0.05), prob, 0.1, 1.0)


def test_blow_up_raises_with_partial_trajectory():
    p = builtin_problem(0.05)
    with pytest.raises(NonFinite) as info:
        integrate("M1", p, 0.025, 1000.0, stride=100)
    part = info.value.partial
    assert part is not None and not part.completed
    assert 1 <= len(part) and np.all(np.isfinite(part.x))
