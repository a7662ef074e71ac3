import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitcontrol import diagnostics as D
from exitcontrol import geometry as G
from exitcontrol import model as M
from exitcontrol import simulate as S

from conftest import brownian_model, zero


def test_discrete_threshold():
    assert D.discrete_exit_threshold(0.01, 1e-6) == pytest.approx(0.98)
    assert D.discrete_exit_threshold(1e-6, 1e-6) == 0.0


def test_martingale_single_step_is_a_coin_flip():
    cfg = S.SimConfig(dt=1e-3, n_paths=20_000)
    r = D.martingale_hitting_test(1e-3, cfg, sigma_hat=lambda s: np.ones_like(s))
    assert r.fraction == pytest.approx(0.5, abs=0.02)


def test_martingale_rejects_nonpositive_volatility():
    with pytest.raises(ValueError):
        D.martingale_hitting_test(0.01, S.SimConfig(dt=1e-3, n_paths=10), sigma_hat=lambda s: np.sin(50 * s))


@settings(max_examples=5, deadline=None)
@given(st.floats(0.1, 10.0))
def test_martingale_fraction_invariant_under_rescaling(c):
    cfg = S.SimConfig(dt=1e-4, n_paths=2000)
    base = D.martingale_hitting_test(0.01, cfg, sigma_hat=lambda s: np.ones_like(s))
    scaled = D.martingale_hitting_test(0.01, cfg, sigma_hat=lambda s: np.full_like(s, c))
    assert scaled.fraction == base.fraction


def test_martingale_fraction_grows_with_steps():
    cfg = S.SimConfig(dt=1e-4, n_paths=4000)
    few = D.martingale_hitting_test(1e-3, cfg).fraction
    many = D.martingale_hitting_test(1e-2, cfg).fraction
    assert many >= few


def test_immediate_exit_failure_case(deterministic):
    m, dom, A = deterministic
    r = D.immediate_exit_test(m, dom, A, 0, 0.5, [-1.0], 0.01, S.SimConfig(dt=1e-5, n_paths=1))
    assert r.fraction == 0.0 and not r.passed and r.condition_holds is False


def test_immediate_exit_drift_case(stochastic):
    m, dom, A = stochastic
    r = D.immediate_exit_test(m, dom, A, [0.0], 0.25, [1.0], 0.01, S.SimConfig(dt=1e-5, n_paths=500))
    assert r.fraction == 1.0 and r.passed
    rec = r.record()
    assert set(rec) >= {"test", "inputs", "statistic", "threshold", "pass"}


def test_immediate_exit_unknown_control(stochastic):
    m, dom, A = stochastic
    with pytest.raises(ValueError):
        D.immediate_exit_test(m, dom, A, [3.0], 0.25, [1.0], 0.01, S.SimConfig(dt=1e-5, n_paths=1))


def test_immediate_exit_nondecreasing_in_delta(stochastic):
    m, dom, A = stochastic
    cfg = S.SimConfig(dt=1e-5, n_paths=2000)
    short = D.immediate_exit_test(m, dom, A, 0, 1.5, [1.0], 1e-4, cfg).fraction
    long = D.immediate_exit_test(m, dom, A, 0, 1.5, [1.0], 1e-3, cfg).fraction
    assert long >= short


def test_brownian_dwell_ratio_oracle():
    # E[theta] / h^2 for BM leaving a ball of radius h before an h^2 horizon
    assert D.brownian_dwell_ratio() == pytest.approx(0.69945, abs=1e-4)


def test_dwell_ratio_is_scale_free():
    m = brownian_model()
    dom = G.SpaceTimeDomain(G.interval(-1, 1), 2.0)
    r = D.dwell_time_test(m, dom, M.constant_policies(M.ControlSet.singleton(0.0)), 0.0, [0.0], [0.05, 0.1],
                          S.SimConfig(n_paths=5000), min_steps=200, lower_bound=0.3)
    assert r.spread < 1e-9 and r.passed
    assert 0.6 < r.min_ratio[0] < 0.8


def test_regime_check():
    m = M.SdeModel(1, 1, 1, lambda t, x, a: np.zeros(x.shape), None, lambda t, x, a: np.ones(x.shape[0]),
                   lambda t, x: x[:, 0].copy())
    dom = G.SpaceTimeDomain(G.interval(-1, 1), 1.0)
    with pytest.raises(D.RegimeError):
        D.check_regime(m, dom, M.ControlSet.singleton(0.0))
    D.check_regime(M.shifted_model(m), dom, M.ControlSet.singleton(0.0))


def test_dini_curve_monotone_on_shared_batches(stochastic):
    m, dom, A = stochastic
    samples = [(0.25, [-1.0]), (1.25, [1.0])]
    dc = D.dini_curve(m, dom, A, M.constant_policies(A), samples, [0.2, 0.1, 0.05], S.SimConfig(dt=1e-2, n_paths=500))
    assert dc.monotone
    assert dc.at(0.1)[0] == dc.h_hat[1]
    with pytest.raises(ValueError):
        D.dini_curve(m, dom, A, M.constant_policies(A), samples, [0.05, 0.1], S.SimConfig(n_paths=1))


def test_sandwich_lower_bound_is_pathwise(stochastic):
    m, dom, A = stochastic
    sw = D.sandwich_test(m, dom, A, M.constant_policies(A), [(0.5, [0.0])], 0.05,
                         S.SimConfig(dt=1e-2, n_paths=500), (1.0, 0.0))
    assert sw.lower_pathwise <= 0.0
    assert sw.passed


def test_deterministic_jump_matches_finite_offset_closed_form(deterministic):
    m, dom, A = deterministic
    delta = 1e-2
    jp = D.jump_probe(m, dom, M.constant_policies(A), D.parabola_curve, [0.3, 0.7], [delta],
                      S.SimConfig(dt=1e-4, n_paths=1))
    assert np.allclose(jp.gap[:, 0], 1 + np.sqrt(delta), atol=2e-3)
    assert np.all(jp.ci == 0.0)


def test_jump_vanishes_without_costs():
    m = M.SdeModel(1, 1, 1, lambda t, x, a: np.full(x.shape, -2 * (t - 1)), None,
                   lambda t, x, a: np.zeros(x.shape[0]), zero)
    dom = G.SpaceTimeDomain(G.interval(-1, 1), 2.0)
    jp = D.jump_probe(m, dom, M.constant_policies(M.ControlSet.singleton(0.0)), D.parabola_curve, [0.5], [1e-3],
                      S.SimConfig(dt=1e-3, n_paths=1))
    assert jp.gap[0, 0] == 0.0


def test_session_csv(tmp_path, deterministic):
    m, dom, A = deterministic
    jp = D.jump_probe(m, dom, M.constant_policies(A), D.parabola_curve, [0.5], [1e-2], S.SimConfig(dt=1e-3, n_paths=1))
    frac = D.martingale_hitting_test(1e-3, S.SimConfig(dt=1e-4, n_paths=100))
    path = tmp_path / "session.csv"
    D.append_session_csv(path, [jp, frac])
    D.append_session_csv(path, [frac])
    rows = list(csv.reader(open(path)))
    assert rows[0][0] == "kind"
    records = [r for r in rows[1:] if r[0] == "record"]
    assert len(records) == 3
    assert json.loads(records[0][-1])["test"] == "jump_probe"
