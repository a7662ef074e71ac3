"""Explicit monotone finite differences for the Cauchy-Dirichlet HJB problem.

    inf_a { V_t + b.DV + 1/2 tr(sigma sigma' D^2 V) + l } = 0   in Q
    V = g                                                      on the parabolic boundary

Drift is upwinded, diffusion uses central second differences, and the time
step obeys  dt * (sum_i a_ii / dx_i^2 + sum_i |b_i| / dx_i) <= 1, which makes
each backward step a monotone map of the next level.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import SpaceTimeDomain
from .model import ControlSet, FeedbackPolicy, SdeModel
from .value import ValueField

log = logging.getLogger(__name__)


class CflError(ValueError):
    def __init__(self, t: float, node, rate: float, dt: float):
        self.t, self.node, self.rate, self.dt = t, np.asarray(node), rate, dt
        self.max_dt = 1.0 / rate
        super().__init__(f"CFL violated at t={t:.6g}, x={self.node.tolist()}: dt={dt:.3e} exceeds "
                         f"the admissible {self.max_dt:.3e}")


@dataclass(frozen=True)
class FdScheme:
    """Grid and stepping parameters.

    ``dx`` is the space step per axis (it must divide each side of the box);
    ``dt=None`` picks ``cfl_safety`` times the largest admissible step found
    on ``cfl_scan_times`` time slices.  The solve stores ``n_store`` uniformly
    spaced time levels.
    """

    dx: tuple
    dt: Optional[float] = None
    cfl_safety: float = 0.9
    cross: str = "none"
    n_store: int = 201
    cfl_scan_times: int = 101

    def __post_init__(self):
        object.__setattr__(self, "dx", tuple(float(v) for v in np.atleast_1d(self.dx)))
        if self.cross not in ("none", "central"):
            raise ValueError("cross must be 'none' or 'central'")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must be in (0, 1]")
        if self.n_store < 2:
            raise ValueError("n_store must be at least 2")


@dataclass
class FdGrid:
    axes: list
    dx: np.ndarray
    nodes: np.ndarray
    interior: np.ndarray
    shape: tuple = field(init=False)

    def __post_init__(self):
        self.shape = tuple(len(a) for a in self.axes)

    @property
    def interior_slice(self):
        return (slice(1, -1),) * len(self.axes)

    @classmethod
    def for_box(cls, lo, hi, dx) -> "FdGrid":
        axes = []
        for l, h, d in zip(lo, hi, dx):
            cells = (h - l) / d
            if abs(cells - round(cells)) > 1e-6 or round(cells) < 2:
                raise ValueError(f"dx={d} does not divide the side [{l}, {h}] into >= 2 cells")
            axes.append(np.linspace(l, h, int(round(cells)) + 1))
        mesh = np.meshgrid(*axes, indexing="ij")
        nodes = np.stack([m.ravel() for m in mesh], axis=1)
        interior = np.zeros(tuple(len(a) for a in axes), dtype=bool)
        interior[(slice(1, -1),) * len(axes)] = True
        return cls(axes, np.asarray(dx, float), nodes, interior.ravel())


def _shift(v: np.ndarray, axis: int, off: int, ndim: int):
    return v[tuple(slice(1 + off, v.shape[j] - 1 + off) if j == axis else slice(1, -1) for j in range(ndim))]


def _shift2(v, ax_i, off_i, ax_j, off_j, ndim):
    sl = []
    for j in range(ndim):
        off = off_i if j == ax_i else off_j if j == ax_j else 0
        sl.append(slice(1 + off, v.shape[j] - 1 + off))
    return v[tuple(sl)]


def _coefficients(model, t, pts, a, cross):
    """``(b, a_diag, a_full or None, l)`` at ``pts``; ``a_full`` only for cross='central'."""
    aa = np.broadcast_to(a, (pts.shape[0], a.size))
    b = model.b(t, pts, aa)
    s = model.sigma(t, pts, aa)
    diag = np.sum(s * s, axis=2)
    full = None
    if pts.shape[1] > 1:
        full = np.einsum("mik,mjk->mij", s, s)
        if cross == "none":
            off = full - diag[:, :, None] * np.eye(pts.shape[1])
            if np.abs(off).max(initial=0.0) > 1e-12 * (1 + np.abs(full).max(initial=0.0)):
                raise ValueError("sigma sigma' has off-diagonal terms; use cross='central' (experimental)")
            full = None
    return b, diag, full, model.ell(t, pts, aa)


def cfl_rate(b: np.ndarray, diag: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """Per-node  sum_i a_ii/dx_i^2 + |b_i|/dx_i."""
    return diag @ (1.0 / dx**2) + np.abs(b) @ (1.0 / dx)


def hjb_step(model: SdeModel, controls: ControlSet, grid: FdGrid, v_next: np.ndarray, t_next: float,
             dt: float, cross: str = "none", check_cfl: bool = True):
    """One backward step at interior nodes; returns ``(interior values, argmin, max rate)``.

    ``v_next`` has the grid shape; the result covers interior nodes only
    (flattened in C order).
    """
    n = len(grid.axes)
    pts = grid.nodes[grid.interior]
    v0 = v_next[grid.interior_slice].ravel()
    fwd, bwd, curv = [], [], []
    for i in range(n):
        vp = _shift(v_next, i, 1, n).ravel()
        vm = _shift(v_next, i, -1, n).ravel()
        fwd.append((vp - v0) / grid.dx[i])
        bwd.append((v0 - vm) / grid.dx[i])
        curv.append((vp - 2.0 * v0 + vm) / grid.dx[i] ** 2)
    mixed = {}
    if cross == "central":
        for i in range(n):
            for q in range(i + 1, n):
                mixed[i, q] = (_shift2(v_next, i, 1, q, 1, n) - _shift2(v_next, i, 1, q, -1, n)
                               - _shift2(v_next, i, -1, q, 1, n)
                               + _shift2(v_next, i, -1, q, -1, n)).ravel() / (4.0 * grid.dx[i] * grid.dx[q])
    best = None
    arg = None
    rate_max = 0.0
    worst_node = None
    for j, a in enumerate(controls.points):
        b, diag, full, ell = _coefficients(model, t_next, pts, a, cross)
        rate = cfl_rate(b, diag, grid.dx)
        k = int(np.argmax(rate))
        if rate[k] > rate_max:
            rate_max, worst_node = float(rate[k]), pts[k]
        ham = ell
        for i in range(n):
            bi = b[:, i]
            ham = ham + np.where(bi > 0, bi * fwd[i], bi * bwd[i]) + 0.5 * diag[:, i] * curv[i]
        for (i, q), d2 in mixed.items():
            ham = ham + full[:, i, q] * d2
        if best is None:
            best, arg = ham, np.zeros(ham.shape, dtype=np.int64)
        else:
            better = ham < best
            best = np.where(better, ham, best)
            arg = np.where(better, j, arg)
    if check_cfl and dt * rate_max > 1.0 + 1e-12:
        raise CflError(t_next, worst_node, rate_max, dt)
    return v0 + dt * best, arg, rate_max


def _scan_rate(model, controls, grid, horizon, count, cross) -> float:
    pts = grid.nodes[grid.interior]
    worst = 0.0
    for t in np.linspace(0.0, horizon, count):
        for a in controls.points:
            b, diag, _, _ = _coefficients(model, float(t), pts, a, cross)
            worst = max(worst, float(cfl_rate(b, diag, grid.dx).max()))
    return worst


def solve_hjb(model: SdeModel, domain: SpaceTimeDomain, controls: ControlSet, scheme: FdScheme):
    """Backward explicit march; returns ``(ValueField, FeedbackPolicy)``.

    Lateral nodes hold ``g(t, .)`` at every level.  The feedback policy stores
    the minimizing control index at each stored level (boundary nodes get the
    first control).
    """
    space = domain.space
    if not space.is_box:
        raise ValueError("the finite-difference solver needs an interval or box domain")
    lo, hi = (np.asarray(v, float) for v in space.bounds)
    dx = np.broadcast_to(np.asarray(scheme.dx, float), lo.shape)
    grid = FdGrid.for_box(lo, hi, dx)
    T = domain.horizon
    m = scheme.n_store - 1

    if scheme.dt is None:
        rate = _scan_rate(model, controls, grid, T, scheme.cfl_scan_times, scheme.cross)
        dt_target = scheme.cfl_safety / rate if rate > 0 else T / m
    else:
        dt_target = scheme.dt
    stride = max(1, math.ceil(T / (dt_target * m) - 1e-9))
    n_steps = stride * m
    dt = T / n_steps
    log.info("hjb: %d steps of dt=%.3e on grid %s", n_steps, dt, grid.shape)

    bnodes = grid.nodes[~grid.interior]
    v = np.empty(grid.shape)
    flat = v.reshape(-1)
    flat[:] = model.g(T, grid.nodes)
    store_v = np.empty((m + 1, *grid.shape))
    store_a = np.zeros((m + 1, *grid.shape), dtype=np.int64)
    store_v[m] = v
    interior_flat = np.nonzero(grid.interior)[0]
    boundary_flat = np.nonzero(~grid.interior)[0]
    max_rate = 0.0
    for k in range(n_steps - 1, -1, -1):
        t_next = (k + 1) * dt
        vi, arg, rate = hjb_step(model, controls, grid, v, t_next, dt, scheme.cross)
        max_rate = max(max_rate, rate)
        new = np.empty(grid.shape)
        nf = new.reshape(-1)
        nf[interior_flat] = vi
        nf[boundary_flat] = model.g(k * dt, bnodes)
        v = new
        if k % stride == 0 or k == n_steps - 1:
            level = k // stride if k % stride == 0 else m
            table = store_a[level].reshape(-1)
            table[interior_flat] = arg
            if k % stride == 0:
                store_v[level] = v
    log.info("hjb: max CFL number %.4f", dt * max_rate)
    times = np.linspace(0.0, T, m + 1)
    meta = {"dt": dt, "n_steps": n_steps, "dx": dx.tolist(), "cfl_number": dt * max_rate, "cross": scheme.cross}
    field_ = ValueField(times, grid.axes, store_v, "finite_difference", meta=meta)
    policy = FeedbackPolicy(controls, times, grid.axes, store_a, name="hjb_feedback")
    return field_, policy


# -- positivity of min_a {G^a(u + g) + l} -------------------------------------


@dataclass
class CostPositivityReport:
    min_value: float
    n_points: int
    violations: list
    holds: bool


def _field_derivs(u: ValueField):
    """``(u, u_t, Du, D^2u)`` at all nodes by second-order finite differences."""
    spacing = [u.times[1] - u.times[0], *(ax[1] - ax[0] for ax in u.axes)]
    vals = u.values
    grads = np.gradient(vals, *spacing, edge_order=2)
    n = u.dim
    ut = grads[0]
    du = np.stack(grads[1:], axis=-1)
    d2u = np.empty(vals.shape + (n, n))
    for i in range(n):
        second = np.gradient(grads[1 + i], *spacing, edge_order=2)
        for j in range(n):
            d2u[..., i, j] = second[1 + j]
    return vals, ut, du, d2u


def check_cost_positivity(model: SdeModel, domain: SpaceTimeDomain, controls: ControlSet,
                     u: Optional[ValueField] = None, times=None, box=None, points_per_axis: int = 41,
                     tol: float = 0.0) -> CostPositivityReport:
    """Evaluate  min_a {G^a(u + g) + l}  on a space-time grid; ``u=None`` means u = 0.

    Without ``u`` the grid spans ``times`` (default 21 levels over [0, T]) and
    ``box`` (default: the domain's bounding box).
    """
    if u is not None:
        ts, axes = u.times, u.axes
        _, ut, du, d2u = _field_derivs(u)
    else:
        ts = np.linspace(0.0, domain.horizon, 21) if times is None else np.asarray(times, float)
        if box is None:
            if domain.space.bounds is None:
                raise ValueError("need a box to sample")
            box = domain.space.bounds
        lo, hi = (np.atleast_1d(np.asarray(v, float)) for v in box)
        axes = [np.linspace(l, h, points_per_axis) for l, h in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    npts, n = pts.shape
    worst = np.inf
    violations = []
    for it, t in enumerate(ts):
        t = float(t)
        gt, gx, gxx = model.g_derivs(t, pts)
        if u is not None:
            gt = gt + ut[it].reshape(-1)
            gx = gx + du[it].reshape(npts, n)
            gxx = gxx + d2u[it].reshape(npts, n, n)
        best = np.full(npts, np.inf)
        for a in controls.points:
            aa = np.broadcast_to(a, (npts, a.size))
            b = model.b(t, pts, aa)
            s = model.sigma(t, pts, aa)
            val = gt + np.einsum("mi,mi->m", b, gx) + 0.5 * np.einsum("mij,mkj,mik->m", s, s, gxx)
            best = np.minimum(best, val + model.ell(t, pts, aa))
        worst = min(worst, float(best.min()))
        for idx in np.nonzero(best < -tol)[0]:
            violations.append((t, pts[idx].tolist(), float(best[idx])))
    return CostPositivityReport(worst, len(ts) * npts, violations, not violations)
