"""Monte Carlo value estimates, value fields and dynamic-programming checks."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .geometry import SpaceTimeDomain
from .model import Policy, SdeModel
from .simulate import (
    SimConfig,
    _simulate_many,
    simulate_penalized_many,
    simulate_window,
)

Z95 = 1.959963984540054


@dataclass(frozen=True)
class ValueEstimate:
    mean: float
    ci_half_width: float
    n_paths: int
    dt: float
    policy: str
    std: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.mean):
            raise ValueError("value estimate is not finite")
        if self.ci_half_width < 0:
            raise ValueError("negative confidence radius")


def summarize(samples: np.ndarray, dt: float, policy: str) -> ValueEstimate:
    n = samples.size
    std = float(np.std(samples, ddof=1)) if n > 1 else 0.0
    return ValueEstimate(float(np.mean(samples)), Z95 * std / np.sqrt(n), n, dt, policy, std)


def _best(estimates: Sequence[ValueEstimate]) -> ValueEstimate:
    # key includes the name so ties do not depend on list order
    return min(estimates, key=lambda e: (e.mean, e.ci_half_width, e.policy))


def _check_policies(policies):
    if not policies:
        raise ValueError("policy list is empty")


def estimate_value(model: SdeModel, domain: SpaceTimeDomain, policies: Sequence[Policy], start,
                   cfg: SimConfig) -> ValueEstimate:
    """Minimum over ``policies`` of the mean of  int_t^tau l ds + g(tau, X_tau)."""
    _check_policies(policies)
    return _best([_stopped_estimates(model, domain, p, [start], cfg)[0] for p in policies])


def _stopped_estimates(model, domain, policy, starts, cfg) -> list[ValueEstimate]:
    batches = _simulate_many(model, domain, policy, starts, cfg, "stopped")
    return [summarize(b.total_cost, cfg.dt, policy.name) for b in batches]


def estimate_penalized_values(model, domain, policies, start, cfg: SimConfig,
                              eps: Sequence[float]) -> dict[float, ValueEstimate]:
    """Penalized estimates for several eps from one batch per policy."""
    _check_policies(policies)
    eps = tuple(float(e) for e in eps)
    if any(e <= 0 for e in eps):
        raise ValueError("eps must be positive")
    per_policy = [simulate_penalized_many(model, domain, p, [start], cfg, eps)[0] for p in policies]
    return {e: _best([summarize(b.penalized_cost[:, j], cfg.dt, p.name) for b, p in zip(per_policy, policies)])
            for j, e in enumerate(eps)}


def estimate_penalized_value(model: SdeModel, domain: SpaceTimeDomain, policies: Sequence[Policy], start,
                             cfg: SimConfig, eps: float) -> ValueEstimate:
    """Minimum over ``policies`` of the mean soft-killed cost up to the horizon."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return estimate_penalized_values(model, domain, policies, start, cfg, [eps])[float(eps)]


# -- value fields ---------------------------------------------------------------

FIELD_MAGIC = b"EXVF"
FIELD_VERSION = 1


@dataclass
class ValueField:
    """Values on a rectangular grid over [0, T] x closure(O).

    ``values`` has shape ``(len(times), *[len(ax) for ax in axes])``; ``ci``
    (95% half widths) is present for Monte Carlo fields.
    """

    times: np.ndarray
    axes: list
    values: np.ndarray
    provenance: str
    ci: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.axes = [np.asarray(ax, float) for ax in self.axes]
        self.values = np.asarray(self.values, float)
        shape = (len(self.times), *(len(ax) for ax in self.axes))
        if self.values.shape != shape:
            raise ValueError(f"values shape {self.values.shape} does not match grid {shape}")
        for ax in [self.times, *self.axes]:
            if len(ax) > 1 and not np.allclose(np.diff(ax), ax[1] - ax[0], rtol=1e-9, atol=1e-12):
                raise ValueError("grid spacing must be uniform per axis")
        if self.provenance not in ("monte_carlo", "finite_difference"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def dim(self) -> int:
        return len(self.axes)

    def nodes(self) -> np.ndarray:
        """All space nodes, shape ``(prod(shape), n)``, in C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def _clip(self, t, x):
        t = np.clip(np.broadcast_to(np.asarray(t, float), (x.shape[0],)), self.times[0], self.times[-1])
        cols = [np.clip(x[:, i], ax[0], ax[-1]) for i, ax in enumerate(self.axes)]
        return np.column_stack([t, *cols])

    def interpolate(self, t, x) -> np.ndarray:
        """Multilinear interpolation; points outside the grid are clamped to it."""
        x = np.asarray(x, float).reshape(-1, self.dim)
        grid = (self.times, *self.axes)
        if len(self.times) == 1:
            raise ValueError("interpolation needs at least two time nodes")
        return RegularGridInterpolator(grid, self.values)(self._clip(t, x))

    def cell_oscillation(self, t, x) -> np.ndarray:
        """max - min of the node values of the grid cell containing each point."""
        x = np.asarray(x, float).reshape(-1, self.dim)
        pts = self._clip(t, x)
        lo_idx = []
        for j, ax in enumerate((self.times, *self.axes)):
            step = ax[1] - ax[0]
            lo_idx.append(np.clip(np.floor((pts[:, j] - ax[0]) / step).astype(np.int64), 0, len(ax) - 2))
        corners = []
        for bits in np.ndindex(*(2,) * (self.dim + 1)):
            corners.append(self.values[tuple(i + b for i, b in zip(lo_idx, bits))])
        corners = np.array(corners)
        return corners.max(axis=0) - corners.min(axis=0)

    # -- export ------------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", *(f"x{i}" for i in range(self.dim)), "value", "ci", "provenance"])
        nodes = self.nodes()
        ci = self.ci if self.ci is not None else np.zeros_like(self.values)
        for it, t in enumerate(self.times):
            vals = self.values[it].ravel()
            cis = ci[it].ravel()
            for node, v, c in zip(nodes, vals, cis):
                w.writerow([repr(float(t)), *(repr(float(c_)) for c_ in node), repr(float(v)), repr(float(c)),
                            self.provenance])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ValueField":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        n = len(header) - 4
        data = np.array([[float(v) for v in r[: n + 3]] for r in body])
        times = np.unique(data[:, 0])
        axes = [np.unique(data[:, 1 + i]) for i in range(n)]
        shape = (len(times), *(len(a) for a in axes))
        return cls(times, axes, data[:, n + 1].reshape(shape), body[0][-1], ci=data[:, n + 2].reshape(shape))

    def to_bytes(self) -> bytes:
        header = json.dumps({
            "version": FIELD_VERSION, "provenance": self.provenance, "dim": self.dim,
            "axes": [{"start": float(a[0]), "spacing": float(a[1] - a[0]) if len(a) > 1 else 0.0, "count": len(a)}
                     for a in (self.times, *self.axes)],
            "has_ci": self.ci is not None, "meta": self.meta,
        }).encode()
        body = self.values.astype("<f8").tobytes()
        if self.ci is not None:
            body += self.ci.astype("<f8").tobytes()
        return FIELD_MAGIC + struct.pack("<HI", FIELD_VERSION, len(header)) + header + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ValueField":
        if raw[:4] != FIELD_MAGIC:
            raise ValueError("not a value-field file")
        version, hlen = struct.unpack_from("<HI", raw, 4)
        if version != FIELD_VERSION:
            raise ValueError(f"unsupported value-field version {version}")
        header = json.loads(raw[10 : 10 + hlen])
        grids = [a["start"] + a["spacing"] * np.arange(a["count"]) for a in header["axes"]]
        shape = tuple(len(g) for g in grids)
        size = int(np.prod(shape))
        body = np.frombuffer(raw[10 + hlen :], dtype="<f8")
        values = body[:size].reshape(shape).copy()
        ci = body[size : 2 * size].reshape(shape).copy() if header["has_ci"] else None
        return cls(grids[0], grids[1:], values, header["provenance"], ci=ci, meta=header.get("meta", {}))


@dataclass(frozen=True)
class GridSpec:
    times: np.ndarray
    axes: tuple

    @classmethod
    def uniform(cls, t_range, nt: int, x_ranges, nx) -> "GridSpec":
        nx = np.broadcast_to(np.atleast_1d(nx), (len(x_ranges),))
        return cls(np.linspace(*t_range, nt), tuple(np.linspace(lo, hi, int(k)) for (lo, hi), k in zip(x_ranges, nx)))


class NodeError(RuntimeError):
    pass


def build_value_field(model: SdeModel, domain: SpaceTimeDomain, policies: Sequence[Policy], grid: GridSpec,
                      cfg: SimConfig, mode: str = "stopped", eps: Optional[float] = None) -> ValueField:
    """Run the stopped or penalized estimator at every grid node.

    All space nodes of one time level are simulated together with common
    random numbers; the paths themselves are block-parallel.
    """
    _check_policies(policies)
    if len(grid.times) < 2 or any(len(ax) < 2 for ax in grid.axes):
        raise ValueError("grid needs at least two nodes per axis")
    if mode not in ("stopped", "penalized"):
        raise ValueError("mode must be 'stopped' or 'penalized'")
    if mode == "penalized" and not (eps is not None and eps > 0):
        raise ValueError("penalized mode needs eps > 0")
    times = np.asarray(grid.times, float)
    if times[0] < -1e-12 or times[-1] > domain.horizon + 1e-12:
        raise ValueError("grid times must lie in [0, T]")
    proto = ValueField(times, list(grid.axes), np.zeros((len(times), *(len(a) for a in grid.axes))), "monte_carlo")
    nodes = proto.nodes()
    if np.any(domain.space.rho(nodes) > domain.space.boundary_tolerance):
        raise ValueError("grid nodes must lie in the closure of O")
    shape = proto.values.shape[1:]
    values = np.empty(proto.values.shape)
    ci = np.empty(proto.values.shape)
    for it, t in enumerate(times):
        starts = [(float(t), node) for node in nodes]
        try:
            per_policy = []
            for p in policies:
                if mode == "stopped":
                    batches = _simulate_many(model, domain, p, starts, cfg, "stopped")
                    per_policy.append([summarize(b.total_cost, cfg.dt, p.name) for b in batches])
                else:
                    batches = simulate_penalized_many(model, domain, p, starts, cfg, [eps])
                    per_policy.append([summarize(b.penalized_cost[:, 0], cfg.dt, p.name) for b in batches])
        except Exception as exc:  # surface which time level failed
            raise NodeError(f"estimation failed at time node t={t}: {exc}") from exc
        best = [_best(col) for col in zip(*per_policy)]
        values[it] = np.array([e.mean for e in best]).reshape(shape)
        ci[it] = np.array([e.ci_half_width for e in best]).reshape(shape)
    meta = {"mode": mode, "n_paths": cfg.n_paths, "dt": cfg.dt, "seed": cfg.seed}
    if eps is not None:
        meta["eps"] = eps
    return ValueField(times, list(grid.axes), values, "monte_carlo", ci=ci, meta=meta)


# -- dynamic programming check ------------------------------------------------


@dataclass(frozen=True)
class StoppingRule:
    """theta = first exit of (s, X_s) from [t, t + duration) x box, capped by tau.

    ``duration=None`` and ``box=None`` give theta = tau; ``duration=0`` gives
    theta = t.
    """

    duration: Optional[float] = None
    box: Optional[tuple] = None


@dataclass(frozen=True)
class DppResult:
    residual: float
    lhs: float
    rhs: float
    ci: float
    interpolation_bound: float
    policy: str

    @property
    def tolerance(self) -> float:
        return 2.0 * (self.ci + self.interpolation_bound)


def dpp_consistency(model: SdeModel, domain: SpaceTimeDomain, policies: Sequence[Policy], start, cfg: SimConfig,
                    rule: StoppingRule, field_: ValueField) -> DppResult:
    """Compare V(t, x) with min_policy E[int_t^theta l ds + V(theta, X_theta)].

    Both V terms are read from ``field_`` by multilinear interpolation; the
    returned interpolation bound is the mean cell oscillation at X_theta.
    """
    _check_policies(policies)
    t0, x0 = float(start[0]), np.atleast_1d(np.asarray(start[1], float))
    space = domain.space
    horizon = domain.horizon
    if rule.duration is not None:
        if rule.duration < 0:
            raise ValueError("duration must be nonnegative")
        if t0 + rule.duration > horizon + 1e-12:
            raise ValueError("stopping rule would run past tau (t + duration > T)")
    if rule.box is not None:
        lo, hi = (np.atleast_1d(np.asarray(v, float)) for v in rule.box)
        corners = np.array(np.meshgrid(*zip(lo, hi), indexing="ij")).reshape(len(lo), -1).T
        if np.any(space.rho(corners) > space.boundary_tolerance):
            raise ValueError("stopping box leaves the domain, so theta could exceed tau")
    lhs = float(field_.interpolate(t0, x0[None, :])[0])
    if rule.duration == 0:
        return DppResult(0.0, lhs, lhs, 0.0, 0.0, "trivial")

    t_end = horizon if rule.duration is None else t0 + rule.duration
    if rule.box is not None:
        c, half = (lo + hi) / 2, (hi - lo) / 2

        def rho(x):
            q = np.abs(x - c) - half
            inner = np.sqrt(np.sum(np.maximum(q, 0.0) ** 2, axis=1)) + np.minimum(q.max(axis=1), 0.0)
            return np.maximum(inner, space.rho(x))
    else:
        rho = space.rho

    results = []
    for p in policies:
        batch = simulate_window(model, rho, p, t0, x0, t_end, cfg)
        theta, xs = batch.exit_time, batch.exit_state
        at_tau = (space.rho(xs) >= 0) | (theta >= horizon - 1e-12)
        cont = np.empty(batch.n_paths)
        # V = g on the parabolic boundary; interpolate elsewhere
        for t_val in np.unique(theta[at_tau]):
            sel = at_tau & (theta == t_val)
            pts = xs[sel]
            if t_val < horizon - 1e-12:
                pts = space.project_to_boundary(pts)
            cont[sel] = model.g(float(t_val), pts)
        inner = ~at_tau
        if inner.any():
            cont[inner] = field_.interpolate(theta[inner], xs[inner])
        samples = batch.running_cost + cont
        est = summarize(samples, cfg.dt, p.name)
        osc = field_.cell_oscillation(theta[inner], xs[inner]) if inner.any() else np.zeros(1)
        results.append((est, float(np.sum(osc) / batch.n_paths)))
    est, bound = min(results, key=lambda r: (r[0].mean, r[0].policy))
    return DppResult(abs(lhs - est.mean), lhs, est.mean, est.ci_half_width, bound, est.policy)


# -- modulus of continuity of the penalized value ------------------------------------


@dataclass
class ModulusFit:
    eps: float
    pairs: list
    distance: np.ndarray
    abs_diff: np.ndarray
    paired_ci: np.ndarray
    combined_ci: np.ndarray
    slope: float
    residuals: np.ndarray
    factor: float = 3.0

    @property
    def within(self) -> np.ndarray:
        return np.abs(self.residuals) <= self.factor * self.combined_ci

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.slope) and self.slope > 0 and np.all(self.within))


def sample_pairs(domain: SpaceTimeDomain, n_pairs: int, max_sep: float, dt: float, seed: int = 0) -> list:
    """Random nearby start pairs ``((t1, x1), (t2, x2))`` inside Q.

    Base points are uniform over the domain's bounding box (rejection on
    rho < 0); partners move by up to ``max_sep`` per axis and by up to
    ``max_sep^2`` in time.  Times are snapped to the dt-grid so all starts
    share one simulation grid.
    """
    if domain.space.bounds is None:
        raise ValueError("pair sampling needs a domain with a bounding box")
    rng = np.random.default_rng(seed)
    lo, hi = (np.atleast_1d(np.asarray(v, float)) for v in domain.space.bounds)
    T = domain.horizon
    pairs = []
    while len(pairs) < n_pairs:
        x1 = rng.uniform(lo, hi)
        x2 = x1 + rng.uniform(-max_sep, max_sep, size=x1.shape)
        t1 = rng.uniform(0.0, T - 2 * max_sep**2 - dt)
        t2 = t1 + rng.uniform(0.0, max_sep**2)
        t1, t2 = (round(t / dt) * dt for t in (t1, t2))
        if np.all(domain.space.rho(np.stack([x1, x2])) < 0) and (t1, x1.tolist()) != (t2, x2.tolist()):
            pairs.append(((t1, x1), (t2, x2)))
    return pairs


def modulus_probe(model: SdeModel, domain: SpaceTimeDomain, policies: Sequence[Policy], eps: float,
                  cfg: SimConfig, pairs=None, n_pairs: int = 50, max_sep: float = 0.1, seed: int = 0,
                  factor: float = 3.0) -> ModulusFit:
    """Fit |V^eps(t1, x1) - V^eps(t2, x2)| ~ C (|x1 - x2| + |t1 - t2|^(1/2)) through the origin.

    All starts are simulated together with common random numbers.  The
    combined CI of a pair is the quadrature sum of the two estimates' CIs;
    the paired (CRN) CI of the difference is reported as well.
    """
    _check_policies(policies)
    if not eps > 0:
        raise ValueError("eps must be positive")
    if pairs is None:
        pairs = sample_pairs(domain, n_pairs, max_sep, cfg.dt, seed)
    starts = [s for pair in pairs for s in pair]
    per_policy = [[b.penalized_cost[:, 0] for b in simulate_penalized_many(model, domain, p, starts, cfg, [eps])]
                  for p in policies]
    dist, diff, pci, cci = [], [], [], []
    for i, ((t1, x1), (t2, x2)) in enumerate(pairs):
        e1 = [summarize(pp[2 * i], cfg.dt, p.name) for pp, p in zip(per_policy, policies)]
        e2 = [summarize(pp[2 * i + 1], cfg.dt, p.name) for pp, p in zip(per_policy, policies)]
        b1, b2 = _best(e1), _best(e2)
        j1 = next(k for k, p in enumerate(policies) if p.name == b1.policy)
        j2 = next(k for k, p in enumerate(policies) if p.name == b2.policy)
        dist.append(float(np.linalg.norm(np.asarray(x1) - np.asarray(x2)) + math.sqrt(abs(t1 - t2))))
        diff.append(abs(b1.mean - b2.mean))
        cci.append(math.hypot(b1.ci_half_width, b2.ci_half_width))
        if j1 == j2:
            pci.append(summarize(per_policy[j1][2 * i] - per_policy[j1][2 * i + 1], cfg.dt, "").ci_half_width)
        else:
            pci.append(cci[-1])
    d, y = np.asarray(dist), np.asarray(diff)
    slope = float(np.dot(d, y) / np.dot(d, d))
    return ModulusFit(float(eps), pairs, d, y, np.asarray(pci), np.asarray(cci), slope, y - slope * d, factor)
