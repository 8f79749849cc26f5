import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgdispatch.model import (ConnectionState, ControlPlan, SystemConfig, assemble_lti,
                              battery_power, battery_setpoint, measure, power_balance_residual,
                              pv_power, step_dynamics, update_default_plan)

floats = st.floats(-10, 10, allow_nan=False)


def conn(A_b=(1, 1, 1), G_b=(1, 1, 1), n_s=3, n_l=3):
    return ConnectionState(A_b=A_b, A_s=[1] * n_s, G_b=G_b, G_s=[1] * n_s, G_l=[1] * n_l)


def test_reference_values():
    cfg = SystemConfig.reference()
    assert cfg.T_s == 0.25 and cfg.N == 12
    np.testing.assert_array_equal(cfg.P_s_max, [1.5, 3, 4.5])
    np.testing.assert_array_equal(cfg.P_b_max, [3, 4, 6])
    np.testing.assert_array_equal(cfg.x_b_max, [11.8, 15.7, 23.7])
    np.testing.assert_array_equal(cfg.C_b1, [0.2, 0.15, 0.1])
    np.testing.assert_allclose(cfg.Q, 0.03 * np.eye(3))


@pytest.mark.parametrize("change", [
    {"P_b_min": [4, -4, -6]}, {"x_b_min": [-1, 0.3, 0.3]}, {"Q": -np.eye(3)},
    {"T_s": 0.0}, {"N": 0}, {"lambda_b": [0, 0, 0]}, {"C_s": [1, 1]},
])
def test_config_rejects_bad_values(change):
    with pytest.raises(ValueError):
        SystemConfig.reference().with_updates(**change)


def test_mask_rejects_non_boolean():
    with pytest.raises(ValueError):
        ConnectionState(A_b=[2, 1, 1], A_s=[1] * 3, G_b=[1] * 3, G_s=[1] * 3, G_l=[1] * 3)


def test_effective_vectors():
    c = ConnectionState(A_b=[1, 0, 1], A_s=[1, 1, 0], G_b=[1, 1, 0], G_s=[0, 1, 1], G_l=[1, 1, 1])
    np.testing.assert_array_equal(c.E_b, [1, 0, 0])
    np.testing.assert_array_equal(c.E_s, [0, 1, 0])
    np.testing.assert_array_equal(c.E_l, [1, 1, 1])


def test_battery_setpoint_examples():
    np.testing.assert_array_equal(battery_setpoint([4, 5, 6], [1, 2, 3], [1, 0, 1]), [4, 2, 6])
    np.testing.assert_array_equal(battery_setpoint([4, 5, 6], [1, 2, 3], [1, 1, 1]), [4, 5, 6])
    np.testing.assert_array_equal(battery_setpoint([4, 5, 6], [1, 2, 3], [0, 0, 0]), [1, 2, 3])


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_battery_setpoint_exhaustive_masks(n):
    rng = np.random.default_rng(n)
    u, d = rng.normal(size=n), rng.normal(size=n)
    for mask in itertools.product([0, 1], repeat=n):
        out = battery_setpoint(u, d, mask)
        for i in range(n):
            assert out[i] == (u[i] if mask[i] else d[i])


def test_battery_power_examples():
    np.testing.assert_array_equal(battery_power([4, 2, 6], [1, 0, 1]), [4, 0, 6])
    np.testing.assert_array_equal(battery_power([4, 2, 6], [1, 1, 1]), [4, 2, 6])
    np.testing.assert_array_equal(battery_power([0, 0, 0], [0, 1, 0]), [0, 0, 0])


def test_pv_power_examples():
    assert pv_power([2], [1.5], [1])[0] == 1.5
    assert pv_power([1], [1.5], [0])[0] == 0
    assert pv_power([1], [1.5], [1])[0] == 1


@given(st.lists(st.tuples(st.floats(0, 5), st.floats(0, 5), st.booleans()), min_size=1, max_size=5))
def test_pv_power_bounds(rows):
    u, a, g = (np.array(c) for c in zip(*rows))
    p = pv_power(u, a, g)
    assert np.all(p[g] <= a[g]) and np.all(p[g] <= u[g])
    assert np.all(p[~g] == 0)


def test_step_dynamics_examples():
    assert step_dynamics([3], [1], [0], 0.25)[0] == 2.75
    assert step_dynamics([3], [0], [0], 0.25)[0] == 3
    assert step_dynamics([3], [0], [0.1], 0.25)[0] == pytest.approx(2.975, abs=1e-15)


@given(floats, floats, floats, st.floats(0.01, 1))
def test_step_dynamics_affine(x, p, w, T):
    assert step_dynamics([x], [p], [w], T)[0] == pytest.approx(x - T * p - T * w, abs=1e-12)


def test_measure_examples():
    np.testing.assert_allclose(measure([3, 4], [0.01, -0.02], [1, 0]), [3.01, 0])
    np.testing.assert_array_equal(measure([3, 4], [0, 0], [1, 1]), [3, 4])
    np.testing.assert_array_equal(measure([3, 4], [0.1, 0.1], [0, 0]), [0, 0])


def test_assemble_lti_examples():
    cfg = SystemConfig.reference()
    m = assemble_lti(cfg, conn(A_b=[1, 0, 1]), [1, 2, 3])
    np.testing.assert_array_equal(m.delta, [0, -0.5, 0])
    np.testing.assert_array_equal(m.B, np.diag([-0.25, 0, -0.25]))
    np.testing.assert_array_equal(m.C, np.diag([1, 0, 1]))
    np.testing.assert_array_equal(m.D, np.diag([1, 0, 1]))
    np.testing.assert_array_equal(m.F, -0.25 * np.eye(3))

    m = assemble_lti(cfg, conn(G_b=[1, 0, 1]), [1, 2, 3])
    np.testing.assert_array_equal(m.delta, 0)
    np.testing.assert_array_equal(m.B, -0.25 * np.diag([1, 0, 1]))

    m = assemble_lti(cfg, conn(A_b=[0, 1, 1], G_b=[0, 1, 1]), [1, 2, 3])
    np.testing.assert_array_equal(m.B[0], 0)
    assert m.delta[0] == 0


@given(st.lists(st.booleans(), min_size=3, max_size=3), st.lists(st.booleans(), min_size=3, max_size=3),
       st.lists(floats, min_size=3, max_size=3))
def test_assemble_lti_round_trip(A, G, d):
    cfg = SystemConfig.reference()
    c = conn(A_b=A, G_b=G)
    m1, m2 = assemble_lti(cfg, c, d), assemble_lti(cfg, c, d)
    for name in ("B", "F", "C", "D", "delta"):
        assert np.array_equal(getattr(m1, name), getattr(m2, name))
    a, g = np.array(A, float), np.array(G, float)
    assert np.array_equal(m1.B, -0.25 * np.diag(g * a))
    assert np.array_equal(m1.delta, -0.25 * g * (1 - a) * np.array(d))


def test_update_default_plan_examples():
    plan = ControlPlan([1.0, 2.0, 3.0], 4)
    np.testing.assert_array_equal(update_default_plan(plan, None, 5).sequence, [2, 3, 3])
    new = update_default_plan(plan, [7, 8, 9], 5)
    np.testing.assert_array_equal(new.sequence, [7, 8, 9])
    assert new.origin_step == 5
    np.testing.assert_array_equal(update_default_plan(plan, None, 9).sequence, [3, 3, 3])
    with pytest.raises(ValueError):
        update_default_plan(plan, [1, 2], 5)
    with pytest.raises(ValueError):
        update_default_plan(plan, None, 3)


def test_update_default_plan_matches_index_enumeration():
    # entry n of the shifted plan is the stored entry n + t, capped at N
    seq = np.arange(5.0)
    for t in range(9):
        out = update_default_plan(ControlPlan(seq, 0), None, t).sequence
        assert list(out) == [seq[min(n + t, 4)] for n in range(5)]


@given(st.lists(floats, min_size=2, max_size=8), st.integers(0, 12))
def test_update_default_plan_composes(seq, t):
    plan = ControlPlan(seq, 3)
    two = update_default_plan(update_default_plan(plan, None, 3 + t), None, 4 + t)
    one = update_default_plan(plan, None, 4 + t)
    assert np.array_equal(two.sequence, one.sequence) and two.origin_step == one.origin_step


def test_plan_at():
    plan = ControlPlan([1.0, 2.0, 3.0], 10)
    assert [plan.at(k) for k in range(10, 15)] == [1, 2, 3, 3, 3]


def test_power_balance_residual_examples():
    c = ConnectionState(A_b=[1], A_s=[1], G_b=[1], G_s=[1], G_l=[1])
    assert power_balance_residual([1], [-0.5], 0, [0.5], c) == 0
    assert power_balance_residual([0], [0], 0, [0], c) == 0
    assert power_balance_residual([2], [0], 0, [1], c) == 1
    shed = ConnectionState(A_b=[1], A_s=[1], G_b=[1], G_s=[1], G_l=[0])
    assert power_balance_residual([2], [0], 0, [1], shed) == 2
