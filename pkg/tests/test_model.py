import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitcontrol import model as M

from conftest import zero


def linear_model(drift, sigma, ell=lambda t, x, a: np.ones(x.shape[0]), g=zero, g_derivs=None):
    return M.SdeModel(1, 1, 1, drift, sigma, ell, g, terminal_cost_derivs=g_derivs)


def test_generator_time_derivative_only():
    m = linear_model(lambda t, x, a: np.zeros(x.shape), None)
    assert M.generator_apply(m, [0.0], 0.0, [0.0], [0.0], [[0.0]], phi_t=1.0) == pytest.approx(1.0)


def test_generator_parabola_drift_term(deterministic):
    m, _, _ = deterministic
    # b(0, .) = 2, phi = x
    assert M.generator_apply(m, [0.0], 0.0, [1.0], [1.0], [[0.0]]) == pytest.approx(2.0)


def test_generator_drift_and_diffusion():
    m = linear_model(lambda t, x, a: np.ones(x.shape), lambda t, x, a: np.full((x.shape[0], 1, 1), np.sqrt(2)))
    # 1*3 + 1/2 * 2 * 2
    assert M.generator_apply(m, [0.0], 0.0, [0.0], [3.0], [[2.0]]) == pytest.approx(5.0)


def test_generator_dimension_mismatch():
    m = linear_model(lambda t, x, a: np.ones(x.shape), None)
    with pytest.raises(ValueError):
        M.generator_apply(m, [0.0], 0.0, [0.0, 1.0], [3.0], [[2.0]])


def test_shifted_running_cost_with_linear_terminal_cost():
    m = linear_model(
        lambda t, x, a: np.full(x.shape, 2.0), None,
        ell=lambda t, x, a: np.zeros(x.shape[0]),
        g=lambda t, x: x[:, 0].copy(),
        g_derivs=lambda t, x: (np.zeros(x.shape[0]), np.ones(x.shape), np.zeros((x.shape[0], 1, 1))),
    )
    assert M.shifted_running_cost(m, 0.0, [0.3], [0.0]) == pytest.approx(2.0)


def test_shifted_running_cost_warns_on_fd_derivatives():
    m = linear_model(lambda t, x, a: np.full(x.shape, 2.0), None, g=lambda t, x: x[:, 0] ** 2)
    with pytest.warns(M.ModelWarning):
        val = M.shifted_running_cost(m, 0.0, [0.5], [0.0])
    # l + b g' = 1 + 2 * 1
    assert val == pytest.approx(3.0, abs=1e-5)


def test_shifted_model_has_zero_terminal_cost():
    m = linear_model(lambda t, x, a: np.full(x.shape, 1.0), None, g=lambda t, x: 3 * x[:, 0])
    sm = M.shifted_model(m)
    x = np.array([[0.2], [0.4]])
    assert np.allclose(sm.g(0.0, x), 0.0)
    assert np.allclose(sm.ell(0.0, x, np.zeros((2, 1))), 1.0 + 3.0, atol=1e-5)


def test_assumption_probe_linear_drift():
    m = linear_model(lambda t, x, a: 2 * x, None)
    rep = M.assumption_probe(m, 200, ((0, 1), -1, 1))
    assert rep.lipschitz["drift"] == pytest.approx(2.0, abs=1e-9)
    assert rep.lipschitz["running_cost"] == 0.0
    assert "cannot certify" in rep.advisory


def test_assumption_probe_positive_part_diffusion(stochastic):
    m, _, _ = stochastic
    rep = M.assumption_probe(m, 500, ((0, 2), -1, 1))
    assert rep.lipschitz["diffusion"] <= 1.0 + 1e-12
    assert rep.lipschitz["running_cost"] == 0.0


def test_builtin_coefficients(stochastic):
    m, dom, A = stochastic
    x = np.array([[0.0]])
    a = np.zeros((1, 1))
    assert m.b(0.0, x, a)[0, 0] == pytest.approx(2.0)
    assert m.sigma(1.0, x, a)[0, 0, 0] == pytest.approx(2.0)
    assert m.sigma(0.0, np.array([[1.0]]), a)[0, 0, 0] == 0.0
    assert dom.horizon == 2.0 and len(A) == 1


def test_unknown_scenario():
    with pytest.raises((KeyError, ValueError)):
        M.builtin_scenario("nope")


def test_control_sets():
    grid = M.ControlSet.box_grid([0, 0], [1, 1], 3)
    assert len(grid) == 9 and grid.dim == 2
    pols = M.constant_policies(grid)
    assert [p.index for p in pols] == list(range(9))
    out = pols[4](0.0, np.zeros((5, 2)))
    assert out.shape == (5, 2) and np.allclose(out, [0.5, 0.5])


def test_constant_policy_batch_sizes_are_independent():
    pol = M.ConstantPolicy(M.ControlSet.singleton(1.5))
    assert pol(0.0, np.zeros((7, 1))).shape == (7, 1)
    assert pol(0.0, np.zeros((3, 1))).shape == (3, 1)


def test_feedback_policy_nearest_node():
    cs = M.ControlSet.finite_grid([[-1.0], [1.0]])
    table = np.array([[0, 0, 1], [1, 1, 0]])
    pol = M.FeedbackPolicy(cs, [0.0, 1.0], [np.array([-1.0, 0.0, 1.0])], table)
    out = pol(0.1, np.array([[0.9], [-0.9]]))
    assert np.allclose(out[:, 0], [1.0, -1.0])


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1.9), st.floats(-0.99, 0.99))
def test_parabola_flow_stays_inside_until_closed_form_exit(t, x):
    tau = M.parabola_exit_time(t, x)
    assert t <= tau <= 2.0
    s = np.linspace(t, tau, 200)[:-1]
    assert np.all(np.abs(M.parabola_flow(t, x, s)) < 1 + 1e-9)
    if tau < 2.0:
        assert abs(M.parabola_flow(t, x, tau)) == pytest.approx(1.0, abs=1e-9)
