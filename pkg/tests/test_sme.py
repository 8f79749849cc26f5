import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgdispatch.model import LtiMatrices, battery_power, battery_setpoint, measure, step_dynamics
from mgdispatch.sme import (CERT_TOL, DegenerateSetError, Ellipsoid, NoiseBounds,
                            SetMembershipEstimator, TraceMinimizer, assemble_lmi, cholesky_factor,
                            contains, correct, fallback_update, lmi_certificate, predict,
                            solve_update)

from oracles import sme_scalar_oracle


def scalar_lti(T_s, measured):
    c = 1.0 if measured else 0.0
    return LtiMatrices(B=np.array([[-T_s * c]]), F=np.array([[-T_s]]), C=np.array([[c]]),
                       D=np.array([[c]]), delta=np.zeros(1))


def lti_for(A, G, T_s=0.25, d=None):
    A, G = np.asarray(A, float), np.asarray(G, float)
    d = np.zeros(A.size) if d is None else np.asarray(d, float)
    return LtiMatrices(B=-T_s * np.diag(G * A), F=-T_s * np.eye(A.size), C=np.diag(A), D=np.diag(A),
                       delta=-T_s * G * (1 - A) * d)


def test_predict_examples():
    zero = LtiMatrices(np.zeros((3, 3)), np.eye(3), np.eye(3), np.eye(3), np.zeros(3))
    x, y = predict([3, 4, 6], zero, [1, 1, 1])
    np.testing.assert_array_equal(x, [3, 4, 6])
    one = LtiMatrices(np.array([[-0.25]]), np.eye(1), np.eye(1), np.eye(1), np.zeros(1))
    assert predict([3], one, [1])[0][0] == 2.75
    drift = LtiMatrices(np.zeros((1, 1)), np.eye(1), np.eye(1), np.eye(1), np.array([-0.5]))
    assert predict([3], drift, [1])[0][0] == 2.5


def test_correct_examples():
    np.testing.assert_array_equal(correct([2, 3], [2, 3], [2, 3], np.eye(2)), [2, 3])
    np.testing.assert_array_equal(correct([2, 3], [2, 3], [5, 5], np.zeros((2, 2))), [2, 3])
    assert correct([2], [2], [2.2], [[0.5]])[0] == pytest.approx(2.1, abs=1e-15)


def test_assemble_lmi_examples():
    b = NoiseBounds(np.eye(1), np.eye(1))
    lti = LtiMatrices(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1))
    M = assemble_lmi(np.eye(1), b, lti, np.zeros((1, 1)), (1, 0, 0), np.eye(1))
    expected = np.zeros((5, 5))
    expected[0, 0] = expected[4, 4] = -1
    expected[0, 4] = expected[4, 0] = 1
    np.testing.assert_array_equal(M, expected)
    # [[-1, 1], [1, -1]] is singular but not negative definite, 1 - sum(lambda) = 0 keeps it NSD
    M2 = assemble_lmi(np.eye(1), b, lti, np.zeros((1, 1)), (0.5, 0, 0), 4 * np.eye(1))
    assert M2[0, 0] == -0.5 and M2[4, 4] == -4 and M2[0, 4] == 1
    # corner entry 1 - 0.5 = 0.5 > 0 makes M2 indefinite; the 2x2 core alone is NSD
    core = M2[np.ix_([0, 4], [0, 4])]
    assert np.linalg.eigvalsh(core).max() <= 1e-12
    with pytest.raises(DegenerateSetError):
        assemble_lmi(-np.eye(1), b, lti, np.zeros((1, 1)), (1, 0, 0), np.eye(1))


def test_cholesky_examples():
    np.testing.assert_array_equal(cholesky_factor(np.eye(3)), np.eye(3))
    assert cholesky_factor(0.04)[0, 0] == pytest.approx(0.2)
    E = cholesky_factor([[4, 2], [2, 2]])
    np.testing.assert_allclose(E, [[2, 0], [1, 1]])
    np.testing.assert_allclose(E @ E.T, [[4, 2], [2, 2]])
    with pytest.raises(DegenerateSetError):
        cholesky_factor([[1, 2], [2, 1]])


def test_contains_examples():
    e = Ellipsoid(np.array([3, 4, 6.0]), 0.12 * np.eye(3))
    assert e.quadratic_form([3.1, 4.1, 5.8]) == pytest.approx(0.5)
    assert contains(e, [3.1, 4.1, 5.8]) and contains(e, [3, 4, 6])
    unit = Ellipsoid(np.zeros(1), np.eye(1))
    assert contains(unit, [1.0000000001]) and not contains(unit, [2.0])
    with pytest.raises((DegenerateSetError, ValueError)):
        contains(Ellipsoid(np.zeros(2), np.diag([1.0, 0.0])), [0, 0])


def test_no_measurement_analytic():
    b = NoiseBounds(np.array([[0.03]]), np.array([[0.0012]]))
    sol = solve_update(np.array([[0.04]]), b, scalar_lti(0.25, False))
    assert np.trace(sol.P) == pytest.approx((np.sqrt(0.04) + 0.25 * np.sqrt(0.03)) ** 2, abs=1e-3)
    assert sol.certificate <= CERT_TOL


def test_oracle_no_measurement_closed_form():
    # the oracle itself against the closed form of the measurement-free bound
    val = sme_scalar_oracle(0.04, 0.03, 0.0012, 0.25, measured=False)
    assert val == pytest.approx((0.2 + 0.25 * np.sqrt(0.03)) ** 2, rel=1e-4)


def test_near_exact_measurement_collapses():
    b = NoiseBounds(np.array([[1e-8]]), np.array([[1e-8]]))
    sol = solve_update(np.array([[0.12]]), b, scalar_lti(0.25, True))
    assert np.trace(sol.P) <= 1e-3


def test_case_one_matrices_shrink():
    I = np.eye(3)
    b = NoiseBounds(0.03 * I, 0.0012 * I)
    sol = solve_update(0.12 * I, b, lti_for([1, 1, 1], [1, 1, 1]))
    assert sol.certificate <= CERT_TOL
    assert np.trace(sol.P) < np.trace(0.12 * I)
    assert lmi_certificate(0.12 * I, b, lti_for([1, 1, 1], [1, 1, 1]), sol.L, sol.lambdas, sol.P) <= CERT_TOL


def _random_scalar(rng):
    return (rng.uniform(0.005, 1.0), rng.uniform(1e-3, 0.1), rng.uniform(1e-4, 0.05),
            rng.uniform(0.1, 0.5), bool(rng.integers(2)))


def test_oracle_near_optimality_randomized():
    rng = np.random.default_rng(11)
    tm = TraceMinimizer(1)
    worst = 0.0
    for _ in range(100):
        p, q, r, T_s, meas = _random_scalar(rng)
        sol = tm.solve(np.array([[p]]), NoiseBounds(np.array([[q]]), np.array([[r]])), scalar_lti(T_s, meas))
        ref = sme_scalar_oracle(p, q, r, T_s, meas)
        assert sol.certificate <= CERT_TOL
        worst = max(worst, abs(np.trace(sol.P) - ref) / ref)
        assert np.trace(sol.P) <= ref * (1 + 1e-2)
    assert worst <= 1e-2


def test_monotone_degradation():
    rng = np.random.default_rng(5)
    tm = TraceMinimizer(1)
    for _ in range(40):
        p, q, r, T_s, _ = _random_scalar(rng)
        b = NoiseBounds(np.array([[q]]), np.array([[r]]))
        with_y = tm.solve(np.array([[p]]), b, scalar_lti(T_s, True)).P[0, 0]
        without = tm.solve(np.array([[p]]), b, scalar_lti(T_s, False)).P[0, 0]
        assert without >= with_y - 1e-9


def test_unobserved_gain_columns_zero():
    I = np.eye(3)
    sol = solve_update(0.12 * I, NoiseBounds(0.03 * I, 0.0012 * I), lti_for([1, 0, 1], [1, 1, 1]))
    np.testing.assert_array_equal(sol.L[:, 1], 0)
    assert sol.certificate <= CERT_TOL
    assert sol.P[1, 1] > 0.12  # the unobserved channel grows


def test_fallback_is_certified():
    I = np.eye(2)
    b = NoiseBounds(0.03 * I, 0.0012 * I)
    sol = fallback_update(0.12 * I, b, lti_for([1, 1], [1, 1]))
    assert sol.certificate <= CERT_TOL and sol.status == "fallback"


def test_symmetric_positive_definite_output():
    I = np.eye(3)
    sol = solve_update(np.diag([0.5, 0.01, 0.2]), NoiseBounds(0.03 * I, 0.0012 * I), lti_for([0, 1, 1], [1, 1, 0]))
    assert np.array_equal(sol.P, sol.P.T)
    assert np.linalg.eigvalsh(sol.P).min() > 0


def test_state_error_identity():
    """Error through the plant/estimator pipeline equals the closed-form error map."""
    rng = np.random.default_rng(3)
    n, T_s = 3, 0.25
    I = np.eye(n)
    b = NoiseBounds(0.03 * I, 0.0012 * I)
    tm = TraceMinimizer(n)
    for _ in range(20):
        A_prev, A_now, G = (rng.integers(0, 2, n).astype(bool) for _ in range(3))
        P_prev = np.diag(rng.uniform(0.01, 0.3, n))
        x_hat = rng.uniform(2, 10, n)
        x = x_hat + rng.uniform(-0.05, 0.05, n)
        u, d = rng.uniform(-2, 2, n), rng.uniform(-2, 2, n)
        w, v = rng.uniform(-0.1, 0.1, n), rng.uniform(-0.02, 0.02, n)
        lti_prev, lti_now = lti_for(A_prev, G, T_s, d), lti_for(A_now, G, T_s)
        sol = tm.solve(P_prev, b, LtiMatrices(lti_prev.B, lti_prev.F, lti_now.C, lti_now.D, lti_prev.delta))
        x_next = step_dynamics(x, battery_power(battery_setpoint(u, d, A_prev), G), w, T_s)
        y = measure(x_next, v, A_now)
        xp, yp = predict(x_hat, lti_prev, u, C=lti_now.C)
        e = x_next - correct(xp, yp, y, sol.L)
        E = cholesky_factor(P_prev)
        z = np.linalg.solve(E, x - x_hat)
        M = I - sol.L @ lti_now.C
        expected = M @ E @ z + M @ lti_prev.F @ w - sol.L @ lti_now.D @ v
        np.testing.assert_allclose(e, expected, atol=1e-9)


def _ellipsoid_draw(rng, S, boundary):
    d = rng.standard_normal(S.shape[0])
    d /= np.sqrt(d @ np.linalg.solve(S, d))
    return d if boundary else d * rng.uniform() ** (1 / S.shape[0])


def test_containment_randomized_steps():
    """1e4 steps of a two-battery estimator under random faults and disturbances."""
    rng = np.random.default_rng(2024)
    n, T_s = 2, 0.25
    I = np.eye(n)
    Q, R = 0.03 * I, 0.0012 * I
    b = NoiseBounds(Q, R)
    est = SetMembershipEstimator(Ellipsoid(np.array([3.1, 4.1]), 0.12 * I), b)
    x = np.array([3.0, 4.0])
    steps, inside = 10_000, 0
    A_prev = G_prev = np.ones(n, bool)
    u_prev = d_prev = np.zeros(n)
    for k in range(steps):
        boundary = k % 2 == 0
        w, v = _ellipsoid_draw(rng, Q, boundary), _ellipsoid_draw(rng, R, boundary)
        x = step_dynamics(x, battery_power(battery_setpoint(u_prev, d_prev, A_prev), G_prev), w, T_s)
        A = rng.random(n) > 0.2
        G = rng.random(n) > 0.1
        y = measure(x, v, A)
        est.step(lti_for(A_prev, G_prev, T_s, d_prev), u_prev, lti_for(A, G, T_s), y, k)
        inside += contains(est.estimate, x)
        # keep the state in a sensible range with a crude proportional command
        u_prev = np.clip((x - 6.0) * 2.0 + rng.uniform(-1, 1, n), -3, 3)
        d_prev = rng.uniform(-1, 1, n)
        A_prev, G_prev = A, G
    assert inside == steps


@settings(max_examples=25, deadline=None)
@given(st.floats(0.005, 1.0), st.floats(1e-3, 0.1), st.floats(1e-4, 0.05), st.booleans())
def test_certificate_property(p, q, r, measured):
    sol = solve_update(np.array([[p]]), NoiseBounds(np.array([[q]]), np.array([[r]])), scalar_lti(0.25, measured))
    assert sol.certificate <= CERT_TOL
