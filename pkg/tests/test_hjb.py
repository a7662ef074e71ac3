import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitcontrol import geometry as G
from exitcontrol import hjb as H
from exitcontrol import model as M

from conftest import zero

SINGLE = M.ControlSet.singleton(0.0)


def constant_model(b=0.0, s=0.0, ell=1.0, g=zero):
    return M.SdeModel(1, 1, 1, lambda t, x, a: np.full(x.shape, b),
                      (lambda t, x, a: np.full((x.shape[0], 1, 1), s)) if s else None,
                      lambda t, x, a: np.full(x.shape[0], ell), g)


def test_trivial_problem_is_exact():
    dom = G.SpaceTimeDomain(G.interval(-1, 1), 2.0)
    f, _ = H.solve_hjb(constant_model(), dom, SINGLE, H.FdScheme(dx=0.1, dt=0.01))
    t = f.times[:, None]
    assert np.abs(f.values[:, 1:-1] - (2.0 - t)).max() < 1e-12


def transport_error(dx, safety=0.9):
    dom = G.SpaceTimeDomain(G.interval(0, 1), 1.0)
    f, _ = H.solve_hjb(constant_model(b=1.0), dom, SINGLE, H.FdScheme(dx=dx, cfl_safety=safety, n_store=11))
    x = f.axes[0][None, :]
    exact = np.minimum(1.0 - f.times[:, None], 1.0 - x)
    # x = 0 is an inflow node that holds g = 0, not the limit value
    err = np.abs(f.values - exact)[:, 1:]
    return err.max(), (err * dx).sum(axis=1).max()


def test_transport_converges():
    coarse, fine = transport_error(0.02), transport_error(0.01)
    assert fine[0] < coarse[0]
    # first order away from the kink in the L1 sense
    assert coarse[1] / fine[1] > 1.7


def test_cfl_violation_is_reported():
    dom = G.SpaceTimeDomain(G.interval(-1, 1), 1.0)
    with pytest.raises(H.CflError) as info:
        H.solve_hjb(constant_model(s=1.0), dom, SINGLE, H.FdScheme(dx=0.1, dt=0.1, n_store=2))
    assert info.value.max_dt == pytest.approx(0.01)


def test_cross_terms_need_opt_in():
    m = M.SdeModel(2, 1, 1, lambda t, x, a: np.zeros(x.shape), lambda t, x, a: np.ones((x.shape[0], 2, 1)),
                   lambda t, x, a: np.ones(x.shape[0]), zero)
    dom = G.SpaceTimeDomain(G.box([0, 0], [1, 1]), 0.1)
    with pytest.raises(ValueError):
        H.solve_hjb(m, dom, SINGLE, H.FdScheme(dx=0.25))
    f, _ = H.solve_hjb(m, dom, SINGLE, H.FdScheme(dx=0.25, cross="central"))
    assert np.all(np.isfinite(f.values))


def test_non_box_domain_rejected():
    dom = G.SpaceTimeDomain(G.ball([0, 0], 1.0), 1.0)
    with pytest.raises(ValueError):
        H.solve_hjb(constant_model(), dom, SINGLE, H.FdScheme(dx=0.1))


def test_grid_must_divide_box():
    with pytest.raises(ValueError):
        H.FdGrid.for_box([0.0], [1.0], [0.3])


def test_linear_in_running_cost_for_single_control():
    dom = G.SpaceTimeDomain(G.interval(-1, 1), 1.0)
    scheme = H.FdScheme(dx=0.1, n_store=11)
    f1, _ = H.solve_hjb(constant_model(b=0.3, s=0.5, ell=1.0), dom, SINGLE, scheme)
    f3, _ = H.solve_hjb(constant_model(b=0.3, s=0.5, ell=3.0), dom, SINGLE, scheme)
    assert np.allclose(f3.values, 3 * f1.values, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=21, max_size=21), st.floats(0.0, 1.0))
def test_step_is_monotone(base, bump):
    model = constant_model(b=0.7, s=0.4)
    grid = H.FdGrid.for_box([-1.0], [1.0], [0.1])
    v = np.asarray(base)
    w = v + bump * (np.arange(21) % 3 == 0)
    dt = 0.9 / (0.16 / 0.01 + 0.7 / 0.1)
    lo, _, _ = H.hjb_step(model, SINGLE, grid, v, 0.5, dt)
    hi, _, _ = H.hjb_step(model, SINGLE, grid, w, 0.5, dt)
    assert np.all(hi >= lo - 1e-12)


def test_feedback_picks_cheapest_control():
    A = M.ControlSet.finite_grid([[-1.0], [1.0]])
    m = M.SdeModel(1, 1, 1, lambda t, x, a: a.copy(), None, lambda t, x, a: np.ones(x.shape[0]), zero)
    dom = G.SpaceTimeDomain(G.interval(-1, 1), 3.0)
    f, pol = H.solve_hjb(m, dom, A, H.FdScheme(dx=0.05, n_store=11))
    # exit through the nearer side
    out = pol(0.0, np.array([[0.5], [-0.5]]))
    assert np.allclose(out[:, 0], [1.0, -1.0])
    assert f.interpolate(0.0, [[0.5]])[0] == pytest.approx(0.5, abs=0.06)


def test_cost_positivity_violation_example():
    m = M.SdeModel(1, 1, 1, lambda t, x, a: np.full(x.shape, -2.0), None,
                   lambda t, x, a: np.ones(x.shape[0]), lambda t, x: x[:, 0].copy(),
                   terminal_cost_derivs=lambda t, x: (np.zeros(x.shape[0]), np.ones(x.shape),
                                                      np.zeros((x.shape[0], 1, 1))))
    dom = G.SpaceTimeDomain(G.interval(-1, 1), 1.0)
    rep = H.check_cost_positivity(m, dom, SINGLE)
    assert not rep.holds
    assert rep.min_value == pytest.approx(-1.0)


def test_cost_positivity_holds_for_parabola(stochastic):
    m, dom, A = stochastic
    rep = H.check_cost_positivity(m, dom, A)
    assert rep.holds and rep.min_value == pytest.approx(1.0)
