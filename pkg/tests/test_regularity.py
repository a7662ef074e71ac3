import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitcontrol import geometry as G
from exitcontrol import model as M
from exitcontrol import regularity as R

from conftest import zero


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.99))
def test_boundary_terms_match_formulas(t):
    m, dom, A = M.builtin_scenario("example41_stochastic")
    up = R.evaluate_exit_condition(m, dom, A, t, [1.0])
    down = R.evaluate_exit_condition(m, dom, A, t, [-1.0])
    assert up.drift_term[0] == pytest.approx(-2 * (t - 1), abs=1e-10)
    assert down.drift_term[0] == pytest.approx(2 * (t - 1), abs=1e-10)
    assert up.sigma_term[0] == pytest.approx(max(2 * t - 1, 0.0), abs=1e-10)
    assert down.sigma_term[0] == pytest.approx(max(2 * t + 1, 0.0), abs=1e-10)


def test_stochastic_scan_exit_condition_everywhere():
    m, dom, A = M.builtin_scenario("example41_stochastic")
    times = np.linspace(0.05, 1.95, 39)
    rep = R.scan_boundary(m, dom, A, times)
    assert rep.exit_condition_all and rep.passed
    assert rep.verdict() == f"boundary exit condition holds at all {rep.n_samples} sampled points"
    drift_fail = rep.failures("drift")
    expected = {(float(t), 1.0) for t in times if t >= 1.0}
    assert expected <= {(float(t), y[0]) for t, y in drift_fail}
    assert not rep.drift_condition_all
    assert rep.cost_positivity_holds
    json.loads(rep.to_json())
    assert "exit" in rep.table()


def test_deterministic_scan_fails_at_lower_endpoint():
    m, dom, A = M.builtin_scenario("example41_deterministic")
    rep = R.scan_boundary(m, dom, A, [0.25, 0.5])
    assert not rep.exit_condition_all
    bad = rep.failures("exit")
    assert {y[0] for _, y in bad} == {-1.0}
    assert rep.verdict().startswith("boundary exit condition fails at")


def test_exact_zero_counts_as_failure():
    # at t = 0.5, y = 1 the stochastic sigma term vanishes but the drift term is 1
    m, dom, A = M.builtin_scenario("example41_deterministic")
    r = R.evaluate_exit_condition(m, dom, A, 1.0, [1.0])
    assert r.drift_term[0] == pytest.approx(0.0) and not r.exit_condition_holds


def test_point_off_boundary_rejected():
    m, dom, A = M.builtin_scenario("example41_stochastic")
    with pytest.raises(ValueError):
        R.evaluate_exit_condition(m, dom, A, 0.5, [0.5])


def test_time_outside_lateral_range_rejected():
    m, dom, A = M.builtin_scenario("example41_stochastic")
    with pytest.raises(ValueError):
        R.scan_boundary(m, dom, A, [2.0])


def test_ball_scan_with_outward_drift():
    dom = G.SpaceTimeDomain(G.ball([0, 0], 1.0), 1.0)
    m = M.SdeModel(2, 2, 1, lambda t, x, a: x.copy(), None, lambda t, x, a: np.ones(x.shape[0]), zero)
    rep = R.scan_boundary(m, dom, M.ControlSet.singleton(0.0), [0.1, 0.5], n_points=16)
    assert rep.exit_condition_all and rep.drift_condition_all
    assert rep.min_drift_margin == pytest.approx(1.0)


def test_any_control_witness_suffices():
    A = M.ControlSet.finite_grid([[-1.0], [1.0]])
    m = M.SdeModel(1, 1, 1, lambda t, x, a: a.copy(), None, lambda t, x, a: np.ones(x.shape[0]), zero)
    dom = G.SpaceTimeDomain(G.interval(-1, 1), 1.0)
    r = R.evaluate_exit_condition(m, dom, A, 0.5, [1.0])
    assert r.exit_condition_holds and r.witnesses
