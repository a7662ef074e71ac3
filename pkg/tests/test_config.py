import numpy as np
import pytest

from exitcontrol import config as C

CUSTOM = """\
name: drift_only
model:
  dim_state: 1
  dim_noise: 1
  drift: ["-2*(t - 1)"]
  diffusion: [["pos(2*t - x0)"]]
  running_cost: "1"
  terminal_cost: "0"
domain: {type: interval, lo: -1, hi: 1}
horizon: 2.0
sim: {dt: 0.01, n_paths: 100}
"""


def test_custom_model_matches_builtin():
    sc = C.build_scenario(C.load_text(CUSTOM))
    ref = C.build_scenario({"scenario": "example41_stochastic"})
    x = np.linspace(-1, 1, 7)[:, None]
    a = np.zeros((7, 1))
    for t in (0.0, 0.7, 1.5):
        assert np.allclose(sc.model.b(t, x, a), ref.model.b(t, x, a))
        assert np.allclose(sc.model.sigma(t, x, a), ref.model.sigma(t, x, a))
    assert sc.domain.horizon == 2.0


def test_sim_block():
    sim = C.sim_config(C.load_text(CUSTOM))
    assert sim.dt == 0.01 and sim.n_paths == 100
    with pytest.raises(C.ConfigError):
        C.sim_config({"sim": {"colour": 1}})


def test_yaml_error_has_line():
    with pytest.raises(C.ConfigError) as info:
        C.load_text("a: 1\nb: [1, 2\nc: 3\n")
    assert info.value.line is not None


def test_bad_expression_reports_field_and_line():
    text = CUSTOM.replace('running_cost: "1"', 'running_cost: "__import__(1)"')
    with pytest.raises(C.ConfigError) as info:
        C.build_scenario(C.load_text(text))
    assert info.value.field == "model.running_cost"
    assert info.value.line == 7


def test_unknown_scenario():
    with pytest.raises(C.ConfigError) as info:
        C.build_scenario(C.load_text("scenario: nope\n"))
    assert info.value.line == 1


def test_expression_whitelist():
    with pytest.raises(C.ConfigError):
        C.Expr("x0.__class__")
    with pytest.raises(C.ConfigError):
        C.Expr("(lambda: 1)()")
    e = C.Expr("maximum(x0, 0) + sin(pi * t)")
    assert e({"x0": np.array([-1.0, 2.0]), "t": 0.5}) == pytest.approx([1.0, 3.0])


def test_overrides_and_round_trip():
    cfg = C.load_text(CUSTOM)
    C.apply_override(cfg, "sim.dt=0.005")
    C.apply_override(cfg, "value.points=[[0.5, 0.0]]")
    assert C.get(cfg, "sim.dt") == 0.005
    assert C.get(cfg, "value.points") == [[0.5, 0.0]]
    again = C.load_text(C.dump(cfg))
    assert C.effective(again) == C.effective(cfg)
    with pytest.raises(C.ConfigError):
        C.apply_override(cfg, "no_equals_sign")


def test_domains_and_controls():
    box = C.domain_from_config({"type": "box", "lo": [0, 0], "hi": [1, 2]}, 1.0)
    assert box.dim == 2
    ball = C.domain_from_config({"type": "ball", "center": [0, 0], "radius": 1}, 1.0)
    assert ball.space.signed_distance([0.0, 0.5]) == pytest.approx(-0.5)
    custom = C.domain_from_config({"type": "custom", "rho": "abs(x0) - 1", "bounds": [[-1], [1]]}, 1.0)
    assert custom.space.signed_distance([0.25]) == pytest.approx(-0.75)
    with pytest.raises(C.ConfigError):
        C.domain_from_config({"type": "torus"}, 1.0)
    with pytest.raises(C.ConfigError):
        C.domain_from_config({"type": "ball", "center": [0]}, 1.0)
    grid = C.controls_from_config({"type": "grid", "points": [[-1], [1]]})
    assert len(grid) == 2
    assert len(C.controls_from_config({"type": "box", "lo": [0], "hi": [1], "resolution": 5})) == 5
