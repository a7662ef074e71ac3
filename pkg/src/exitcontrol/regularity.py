"""Pointwise boundary checks for continuity of the value function.

At a lateral boundary point (t, y) two quantities are computed per control:

    L_t^a rho(y) = b.D rho + 1/2 tr(sigma sigma' D^2 rho)
    |sigma'(t, y, a) D rho(y)|

The weak condition asks that some control makes the larger of the two
positive; the classical drift condition asks for L_t^a rho > 0 alone.
Verdicts only ever cover the sampled points.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import SpaceTimeDomain
from .hjb import check_cost_positivity
from .model import ControlSet, SdeModel

DEFAULT_MARGIN = 1e-8


@dataclass
class BoundaryPointReport:
    t: float
    y: list
    drift_term: list
    sigma_term: list
    exit_condition_holds: bool
    drift_condition_holds: bool
    witnesses: list
    margin: float = DEFAULT_MARGIN

    @property
    def exit_condition_value(self) -> float:
        return float(max(max(d, s) for d, s in zip(self.drift_term, self.sigma_term)))

    @property
    def drift_condition_value(self) -> float:
        return float(max(self.drift_term))


def evaluate_exit_condition(model: SdeModel, domain: SpaceTimeDomain, controls: ControlSet, t: float, y,
                        margin: float = DEFAULT_MARGIN) -> BoundaryPointReport:
    """Both boundary terms for every control at ``(t, y)``; ``y`` must sit on the boundary."""
    space = domain.space
    y = np.atleast_1d(np.asarray(y, float))
    r = float(space.rho(y[None, :])[0])
    if abs(r) > space.boundary_tolerance:
        raise ValueError(f"y={y.tolist()} is {abs(r):.3e} away from the boundary "
                         f"(tolerance {space.boundary_tolerance:.1e})")
    grad, hess = space.grad_hess(y[None, :])
    m = len(controls)
    pts = np.repeat(y[None, :], m, axis=0)
    b = model.b(float(t), pts, controls.points)
    s = model.sigma(float(t), pts, controls.points)
    g = np.repeat(grad, m, axis=0)
    h = np.repeat(hess, m, axis=0)
    drift = np.einsum("mi,mi->m", b, g) + 0.5 * np.einsum("mij,mkj,mik->m", s, s, h)
    sig = np.linalg.norm(np.einsum("mij,mi->mj", s, g), axis=1)
    both = np.maximum(drift, sig)
    witnesses = [int(k) for k in np.nonzero(both > margin)[0]]
    return BoundaryPointReport(float(t), y.tolist(), drift.tolist(), sig.tolist(),
                               bool(witnesses), bool(np.any(drift > margin)), witnesses, margin)


@dataclass
class CertificationReport:
    times: list
    points: list
    reports: list
    exit_condition_all: bool
    drift_condition_all: bool
    cost_positivity_holds: bool
    cost_positivity_min: float
    min_exit_margin: float
    min_drift_margin: float
    margin: float = DEFAULT_MARGIN
    extra: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return len(self.reports)

    @property
    def passed(self) -> bool:
        return self.exit_condition_all

    def verdict(self) -> str:
        n = self.n_samples
        if self.exit_condition_all:
            return f"boundary exit condition holds at all {n} sampled points"
        bad = sum(not r.exit_condition_holds for r in self.reports)
        return f"boundary exit condition fails at {bad} of {n} sampled points"

    def failures(self, which: str = "exit") -> list:
        attr = "exit_condition_holds" if which == "exit" else "drift_condition_holds"
        return [(r.t, r.y) for r in self.reports if not getattr(r, attr)]

    def to_json(self) -> str:
        payload = {
            "times": self.times,
            "points": self.points,
            "margin": self.margin,
            "n_samples": self.n_samples,
            "verdict": self.verdict(),
            "exit_condition_all": self.exit_condition_all,
            "drift_condition_all": self.drift_condition_all,
            "cost_positivity_holds": self.cost_positivity_holds,
            "cost_positivity_min": self.cost_positivity_min,
            "min_exit_margin": self.min_exit_margin,
            "min_drift_margin": self.min_drift_margin,
            "points_report": [asdict(r) for r in self.reports],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'t':>8} {'y':>18} {'L rho':>12} {'|s D rho|':>12} {'exit':>6} {'drift':>6}"]
        for r in self.reports:
            k = int(np.argmax(np.maximum(r.drift_term, r.sigma_term)))
            y = ",".join(f"{v:.4g}" for v in r.y)
            lines.append(f"{r.t:8.4f} {y:>18} {r.drift_term[k]:12.6g} {r.sigma_term[k]:12.6g} "
                         f"{'yes' if r.exit_condition_holds else 'no':>6} {'yes' if r.drift_condition_holds else 'no':>6}")
        lines.append(self.verdict())
        return "\n".join(lines)


def scan_boundary(model: SdeModel, domain: SpaceTimeDomain, controls: ControlSet, times: Sequence[float],
                  points: Optional[np.ndarray] = None, n_points: int = 64,
                  margin: float = DEFAULT_MARGIN) -> CertificationReport:
    """Evaluate both conditions at every (time, boundary point) pair.

    ``points`` defaults to ``n_points`` samples from the domain's boundary
    sampler.  Times at or beyond T are rejected since the condition lives on
    [0, T) x boundary.  The report also carries the u = 0 check of
    min_a {G^a g + l} >= 0.
    """
    times = [float(t) for t in times]
    if any(t < 0 or t >= domain.horizon for t in times):
        raise ValueError("sample times must lie in [0, T)")
    if points is None:
        points = domain.space.sample_boundary(n_points)
    points = np.atleast_2d(np.asarray(points, float))
    if points.shape[1] != domain.dim:
        points = points.reshape(-1, domain.dim)
    reports = [evaluate_exit_condition(model, domain, controls, t, y, margin) for t in times for y in points]
    box = domain.space.bounds
    if box is None:
        box = (points.min(axis=0), points.max(axis=0))
    positivity = check_cost_positivity(model, domain, controls, box=box)
    exit_vals = [r.exit_condition_value for r in reports]
    drift_vals = [r.drift_condition_value for r in reports]
    return CertificationReport(
        times, points.tolist(), reports,
        all(r.exit_condition_holds for r in reports), all(r.drift_condition_holds for r in reports),
        positivity.holds, positivity.min_value, float(min(exit_vals)), float(min(drift_vals)), margin,
    )
