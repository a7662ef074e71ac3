import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitcontrol import geometry as G
from exitcontrol import model as M
from exitcontrol import simulate as S
from exitcontrol import value as V

from conftest import brownian_model, zero


def zero_cost_model():
    return M.SdeModel(1, 1, 1, lambda t, x, a: np.zeros(x.shape), lambda t, x, a: np.ones((x.shape[0], 1, 1)),
                      lambda t, x, a: np.zeros(x.shape[0]), zero)


def test_value_of_deterministic_flow_is_exit_time(deterministic):
    m, dom, A = deterministic
    est = V.estimate_value(m, dom, M.constant_policies(A), (0.0, [0.01]), S.SimConfig(dt=1e-4, n_paths=1))
    assert est.mean == pytest.approx(0.9, abs=2e-3)
    assert est.ci_half_width == 0.0


def test_min_over_policies_picks_cheapest():
    # drift a pushes out of (-1, 1) at speed |a|; cost 1 per unit time
    A = M.ControlSet.finite_grid([[0.5], [2.0]])
    m = M.SdeModel(1, 1, 1, lambda t, x, a: a.copy(), None, lambda t, x, a: np.ones(x.shape[0]), zero)
    dom = G.SpaceTimeDomain(G.interval(-1, 1), 5.0)
    est = V.estimate_value(m, dom, M.constant_policies(A), (0.0, [0.0]), S.SimConfig(dt=1e-3, n_paths=1))
    assert est.mean == pytest.approx(0.5, abs=2e-3)
    assert est.policy == "constant[1]"


def test_empty_policy_list():
    m = zero_cost_model()
    dom = G.SpaceTimeDomain(G.interval(-1, 1), 1.0)
    with pytest.raises(ValueError):
        V.estimate_value(m, dom, [], (0.0, [0.0]), S.SimConfig(n_paths=1))


def test_penalized_sandwich_lower_bound_pathwise(stochastic):
    m, dom, A = stochastic
    cfg = S.SimConfig(dt=1e-2, n_paths=2000)
    pol = M.ConstantPolicy(A)
    stopped = S.simulate_stopped(m, dom, pol, (0.5, [0.0]), cfg)
    pen = S.simulate_penalized(m, dom, pol, (0.5, [0.0]), cfg, eps=[0.05])
    # l >= 0 and g = 0: the penalized cost dominates the stopped one path by path
    assert np.all(pen.penalized_cost[:, 0] >= stopped.total_cost - 1e-12)


def test_penalized_estimates_share_batches(stochastic):
    m, dom, A = stochastic
    est = V.estimate_penalized_values(m, dom, M.constant_policies(A), (0.5, [0.0]),
                                      S.SimConfig(dt=1e-2, n_paths=1000), [0.2, 0.05])
    assert est[0.2].mean >= est[0.05].mean
    with pytest.raises(ValueError):
        V.estimate_penalized_value(m, dom, M.constant_policies(A), (0.5, [0.0]), S.SimConfig(n_paths=1), 0.0)


def test_zero_cost_field_is_zero():
    dom = G.SpaceTimeDomain(G.interval(-1, 1), 1.0)
    grid = V.GridSpec.uniform((0.0, 1.0), 3, [(-1.0, 1.0)], 5)
    f = V.build_value_field(zero_cost_model(), dom, M.constant_policies(M.ControlSet.singleton(0.0)), grid,
                            S.SimConfig(dt=1e-2, n_paths=100))
    assert np.all(f.values == 0.0) and f.provenance == "monte_carlo"


def test_field_rejects_nodes_outside_domain():
    dom = G.SpaceTimeDomain(G.interval(-1, 1), 1.0)
    grid = V.GridSpec.uniform((0.0, 1.0), 3, [(-2.0, 1.0)], 4)
    with pytest.raises(ValueError):
        V.build_value_field(zero_cost_model(), dom, M.constant_policies(M.ControlSet.singleton(0.0)), grid,
                            S.SimConfig(n_paths=1))


def test_field_round_trips():
    rng = np.random.default_rng(0)
    f = V.ValueField(np.linspace(0, 1, 3), [np.linspace(-1, 1, 4), np.linspace(0, 2, 5)], rng.random((3, 4, 5)),
                     "monte_carlo", ci=rng.random((3, 4, 5)))
    g = V.ValueField.from_bytes(f.to_bytes())
    assert np.array_equal(f.values, g.values) and np.array_equal(f.ci, g.ci)
    h = V.ValueField.from_csv(f.to_csv())
    assert np.array_equal(f.values, h.values)
    assert np.allclose(f.axes[1], h.axes[1])


def test_field_validation():
    with pytest.raises(ValueError):
        V.ValueField([0, 1], [[0, 1]], np.zeros((2, 3)), "monte_carlo")
    with pytest.raises(ValueError):
        V.ValueField([0, 1], [[0, 1]], np.zeros((2, 2)), "guess")
    with pytest.raises(ValueError):
        V.ValueField.from_bytes(b"nope")


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.floats(-1, 1))
def test_interpolation_is_exact_for_affine_data(t, x):
    times, ax = np.linspace(0, 1, 5), np.linspace(-1, 1, 7)
    vals = 2 * times[:, None] - 3 * ax[None, :] + 1
    f = V.ValueField(times, [ax], vals, "finite_difference")
    assert f.interpolate(t, [[x]])[0] == pytest.approx(2 * t - 3 * x + 1, abs=1e-12)
    assert f.cell_oscillation(t, [[x]])[0] >= 0


def test_dpp_consistency_on_brownian_exit_time():
    m = brownian_model()
    dom = G.SpaceTimeDomain(G.interval(-1, 1), 1.0)
    pols = M.constant_policies(M.ControlSet.singleton(0.0))
    cfg = S.SimConfig(dt=1e-3, n_paths=4000)
    grid = V.GridSpec.uniform((0.0, 1.0), 11, [(-1.0, 1.0)], 11)
    f = V.build_value_field(m, dom, pols, grid, cfg)
    res = V.dpp_consistency(m, dom, pols, (0.2, [0.0]), cfg.replace(seed=1), V.StoppingRule(duration=0.3), f)
    assert abs(res.residual) <= res.tolerance
    zero_rule = V.dpp_consistency(m, dom, pols, (0.2, [0.0]), cfg, V.StoppingRule(duration=0.0), f)
    assert zero_rule.residual == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        V.dpp_consistency(m, dom, pols, (0.9, [0.0]), cfg, V.StoppingRule(duration=0.5), f)


def test_sample_pairs_inside_domain_on_grid(stochastic):
    _, dom, _ = stochastic
    pairs = V.sample_pairs(dom, 20, 0.1, 1e-3, seed=1)
    assert len(pairs) == 20
    for (t1, x1), (t2, x2) in pairs:
        assert abs(x1[0]) < 1 and abs(x2[0]) < 1
        assert abs(t1 / 1e-3 - round(t1 / 1e-3)) < 1e-6
        assert 0 <= t2 - t1 <= 0.01 + 1e-3


def test_modulus_probe_slope_is_positive(stochastic):
    m, dom, A = stochastic
    fit = V.modulus_probe(m, dom, M.constant_policies(A), 0.1, S.SimConfig(dt=1e-2, n_paths=500), n_pairs=8)
    assert np.isfinite(fit.slope) and fit.slope > 0
    assert fit.residuals.shape == (8,)
