"""Monte Carlo and finite-difference tools for exit-time stochastic control."""

__version__ = "0.1.0"

from .geometry import SpaceDomain, SpaceTimeDomain, ball, box, custom, interval  # noqa: E402
from .model import (  # noqa: E402
    ConstantPolicy,
    ControlSet,
    FeedbackPolicy,
    SdeModel,
    builtin_scenario,
    constant_policies,
)
from .simulate import SimConfig, crn_pair, simulate_penalized, simulate_stopped  # noqa: E402
from .value import ValueEstimate, ValueField, estimate_penalized_value, estimate_value  # noqa: E402

__all__ = [
    "SpaceDomain", "SpaceTimeDomain", "ball", "box", "custom", "interval",
    "ConstantPolicy", "ControlSet", "FeedbackPolicy", "SdeModel", "builtin_scenario", "constant_policies",
    "SimConfig", "crn_pair", "simulate_penalized", "simulate_stopped",
    "ValueEstimate", "ValueField", "estimate_penalized_value", "estimate_value",
]
