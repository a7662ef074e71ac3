"""Controlled SDE models, control sets, policies and built-in scenarios.

Model coefficients are vectorized over a batch of states sharing one time:

    drift(t, x, a)         -> (m, n)
    diffusion(t, x, a)     -> (m, n, d)     (``None`` means identically zero)
    running_cost(t, x, a)  -> (m,)
    terminal_cost(t, x)    -> (m,)

with ``t`` a float, ``x`` of shape ``(m, n)`` and ``a`` of shape ``(m, k)``.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .geometry import DEFAULT_FD_STEP, SpaceTimeDomain, interval


class ModelWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SdeModel:
    dim_state: int
    dim_noise: int
    dim_control: int
    drift: Callable
    diffusion: Optional[Callable]
    running_cost: Callable
    terminal_cost: Callable
    terminal_cost_derivs: Optional[Callable] = None
    name: str = "model"
    fd_step: float = DEFAULT_FD_STEP

    @property
    def deterministic(self) -> bool:
        return self.diffusion is None

    def b(self, t, x, a) -> np.ndarray:
        return _shaped(self.drift(t, x, a), x.shape)

    def sigma(self, t, x, a) -> np.ndarray:
        shape = (x.shape[0], self.dim_state, self.dim_noise)
        if self.diffusion is None:
            return np.zeros(shape)
        return _shaped(self.diffusion(t, x, a), shape)

    def ell(self, t, x, a) -> np.ndarray:
        return _shaped(self.running_cost(t, x, a), x.shape[:1])

    def g(self, t, x) -> np.ndarray:
        return _shaped(self.terminal_cost(t, x), x.shape[:1])

    def g_derivs(self, t, x):
        """``(g_t, D_x g, D_x^2 g)`` at a batch; finite differences if not supplied."""
        if self.terminal_cost_derivs is not None:
            gt, gx, gxx = self.terminal_cost_derivs(t, x)
            m, n = x.shape
            return (np.broadcast_to(np.asarray(gt, float), (m,)),
                    np.broadcast_to(np.asarray(gx, float), (m, n)),
                    np.broadcast_to(np.asarray(gxx, float), (m, n, n)))
        return fd_terminal_derivs(self.terminal_cost, t, x, self.fd_step)


def _shaped(value, shape) -> np.ndarray:
    # user coefficients may return scalars or partially broadcast arrays
    if isinstance(value, np.ndarray) and value.shape == shape and value.dtype == np.float64:
        return value
    return np.broadcast_to(np.asarray(value, dtype=float), shape)


def fd_terminal_derivs(g, t, x, h):
    m, n = x.shape
    eye = np.eye(n) * h
    g0 = np.asarray(g(t, x), float) * np.ones(m)
    gt = (np.asarray(g(t + h, x), float) - np.asarray(g(t - h, x), float)) / (2 * h) * np.ones(m)
    gx = np.empty((m, n))
    gxx = np.empty((m, n, n))
    for i in range(n):
        fp = np.asarray(g(t, x + eye[i]), float) * np.ones(m)
        fm = np.asarray(g(t, x - eye[i]), float) * np.ones(m)
        gx[:, i] = (fp - fm) / (2 * h)
        gxx[:, i, i] = (fp - 2 * g0 + fm) / h**2
        for j in range(i + 1, n):
            v = [np.asarray(g(t, x + si * eye[i] + sj * eye[j]), float) * np.ones(m)
                 for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1))]
            gxx[:, i, j] = gxx[:, j, i] = (v[0] - v[1] - v[2] + v[3]) / (4 * h**2)
    return gt, gx, gxx


# -- controls ---------------------------------------------------------------


@dataclass(frozen=True)
class ControlSet:
    kind: str
    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] == 0:
            raise ValueError("control set is empty")
        if not np.all(np.isfinite(pts)):
            raise ValueError("control points must be finite")
        if len({tuple(p) for p in pts}) != len(pts):
            raise ValueError("control grid points must be pairwise distinct")
        object.__setattr__(self, "points", pts)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def singleton(cls, a=0.0) -> "ControlSet":
        return cls("singleton", np.atleast_1d(np.asarray(a, float))[None, :])

    @classmethod
    def finite_grid(cls, points) -> "ControlSet":
        pts = np.asarray(points, float)
        return cls("finite_grid", pts.reshape(len(pts), -1))

    @classmethod
    def box_grid(cls, lo, hi, resolution) -> "ControlSet":
        lo, hi = np.atleast_1d(lo).astype(float), np.atleast_1d(hi).astype(float)
        res = np.broadcast_to(np.atleast_1d(resolution), lo.shape)
        axes = [np.linspace(l, h, int(r)) if r > 1 else np.array([l]) for l, h, r in zip(lo, hi, res)]
        return cls("box_grid", np.array(list(itertools.product(*axes))))

    def contains(self, a: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(a)
        return np.any(np.all(a[:, None, :] == self.points[None], axis=2), axis=1)


class Policy:
    """Markov rule ``(t, x) -> a``; subclasses emit points of ``control_set``."""

    name: str
    control_set: ControlSet

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ConstantPolicy(Policy):
    def __init__(self, control_set: ControlSet, index: int = 0, name: str | None = None):
        self.control_set = control_set
        self.index = int(index)
        self.a = control_set.points[self.index]
        self.name = name or f"constant[{self.index}]"
        self._cache = self.a[None, :]

    def __call__(self, t, x):
        # read the cache once so concurrent callers never see another batch size
        cached = self._cache
        if cached.shape[0] != x.shape[0]:
            cached = np.ascontiguousarray(np.broadcast_to(self.a, (x.shape[0], self.a.size)))
            self._cache = cached
        return cached

    def __repr__(self):
        return f"ConstantPolicy({self.a.tolist()})"


class FeedbackPolicy(Policy):
    """Nearest-cell lookup in a table of control indices.

    ``table`` has shape ``(len(times), *[len(ax) for ax in axes])``.
    """

    def __init__(self, control_set: ControlSet, times, axes, table, name: str = "feedback"):
        self.control_set = control_set
        self.times = np.asarray(times, float)
        self.axes = [np.asarray(ax, float) for ax in axes]
        self.table = np.asarray(table, dtype=np.int64)
        self.name = name
        if self.table.shape != (len(self.times), *(len(ax) for ax in self.axes)):
            raise ValueError("feedback table shape does not match its grid")
        if self.table.min() < 0 or self.table.max() >= len(control_set):
            raise ValueError("feedback table refers to controls outside the control set")

    @staticmethod
    def _nearest(grid: np.ndarray, v) -> np.ndarray:
        if len(grid) == 1:
            return np.zeros(np.shape(v), dtype=np.int64)
        step = (grid[-1] - grid[0]) / (len(grid) - 1)
        return np.clip(np.rint((np.asarray(v) - grid[0]) / step), 0, len(grid) - 1).astype(np.int64)

    def __call__(self, t, x):
        it = int(self._nearest(self.times, t))
        idx = tuple(self._nearest(ax, x[:, i]) for i, ax in enumerate(self.axes))
        return self.control_set.points[self.table[(it, *idx)]]


def constant_policies(control_set: ControlSet) -> list[ConstantPolicy]:
    return [ConstantPolicy(control_set, i) for i in range(len(control_set))]


# -- operators --------------------------------------------------------------


def _point(x, n) -> np.ndarray:
    return np.asarray(x, float).reshape(1, n)


def _control(a, k) -> np.ndarray:
    return np.asarray(a, float).reshape(1, k)


def generator_apply(model: SdeModel, a, t: float, x, phi_grad, phi_hess, phi_t: float = 0.0) -> float:
    """``phi_t + b·Dphi + 1/2 tr(sigma sigma' D^2 phi)`` at a single point."""
    n = model.dim_state
    grad = np.asarray(phi_grad, float).reshape(-1)
    hess = np.asarray(phi_hess, float).reshape(n, n) if np.size(phi_hess) == n * n else None
    if grad.size != n or hess is None or np.size(x) != n or np.size(a) != model.dim_control:
        raise ValueError("dimension mismatch between model and derivative data")
    xx, aa = _point(x, n), _control(a, model.dim_control)
    b = model.b(t, xx, aa)[0]
    s = model.sigma(t, xx, aa)[0]
    return float(phi_t + b @ grad + 0.5 * np.trace(s @ s.T @ hess))


def generator_batch(model: SdeModel, t, x, a, grad, hess, phi_t) -> np.ndarray:
    b = model.b(t, x, a)
    s = model.sigma(t, x, a)
    diff = 0.5 * np.einsum("mij,mkj,mik->m", s, s, hess)
    return phi_t + np.einsum("mi,mi->m", b, grad) + diff


def shifted_running_cost(model: SdeModel, t, x, a) -> float | np.ndarray:
    """Running cost plus the generator applied to the terminal cost.

    Accepts a single point or a batch ``(m, n)`` with controls ``(m, k)``.
    Issues a ``ModelWarning`` when the terminal-cost derivatives fall back to
    finite differences.
    """
    single = np.ndim(x) <= 1
    xx = np.asarray(x, float).reshape(-1, model.dim_state)
    aa = np.broadcast_to(np.asarray(a, float).reshape(-1, model.dim_control), (xx.shape[0], model.dim_control))
    if model.terminal_cost_derivs is None:
        warnings.warn("terminal-cost derivatives by finite differences", ModelWarning, stacklevel=2)
    out = _shifted_batch(model, t, xx, aa)
    return float(out[0]) if single else out


def _shifted_batch(model, t, x, a):
    gt, gx, gxx = model.g_derivs(t, x)
    return model.ell(t, x, a) + generator_batch(model, t, x, a, gx, gxx, gt)


def shifted_model(model: SdeModel) -> SdeModel:
    """Same dynamics with running cost ``l + G^a g`` and zero terminal cost."""
    def ell(t, x, a):
        return _shifted_batch(model, t, x, a)

    return SdeModel(
        model.dim_state, model.dim_noise, model.dim_control, model.drift, model.diffusion,
        ell, _zero_terminal, _zero_terminal_derivs, name=f"{model.name}+gshift", fd_step=model.fd_step,
    )


def _zero_terminal(t, x):
    return np.zeros(x.shape[0])


def _zero_terminal_derivs(t, x):
    m, n = x.shape
    return np.zeros(m), np.zeros((m, n)), np.zeros((m, n, n))


# -- sampling probe ---------------------------------------------------------


@dataclass
class AssumptionReport:
    """Empirical Lipschitz and growth constants over random samples.

    Advisory only: a finite sample can refute but never certify the bounds.
    """

    sample_count: int
    lipschitz: dict[str, float]
    growth: dict[str, float]
    advisory: str = "sampling-based estimate; cannot certify the Lipschitz/growth assumptions"

    @property
    def constant(self) -> float:
        return max(max(self.lipschitz.values()), max(self.growth.values()))


def assumption_probe(model: SdeModel, sample_count: int, region, controls: ControlSet | None = None,
                     seed: int = 0) -> AssumptionReport:
    """Sample ``(t, x1, x2, a)`` and report the largest ratios seen.

    ``region`` is ``((t_lo, t_hi), x_lo, x_hi)``.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be at least 2")
    (t_lo, t_hi), x_lo, x_hi = region
    n, k = model.dim_state, model.dim_control
    x_lo = np.broadcast_to(np.asarray(x_lo, float), (n,))
    x_hi = np.broadcast_to(np.asarray(x_hi, float), (n,))
    rng = np.random.default_rng(seed)
    pts = controls.points if controls is not None else np.zeros((1, k))
    lip = dict.fromkeys(("drift", "diffusion", "running_cost", "terminal_cost"), 0.0)
    grow = dict.fromkeys(("drift", "diffusion", "running_cost", "terminal_cost"), 0.0)
    ts = rng.uniform(t_lo, t_hi, sample_count)
    x1 = rng.uniform(x_lo, x_hi, (sample_count, n))
    x2 = rng.uniform(x_lo, x_hi, (sample_count, n))
    ai = rng.integers(0, len(pts), sample_count)
    for i in range(sample_count):
        a = pts[ai[i]][None, :]
        p1, p2, t = x1[i : i + 1], x2[i : i + 1], float(ts[i])
        dx = np.linalg.norm(p1 - p2)
        if dx == 0:
            continue
        vals1 = (model.b(t, p1, a)[0], model.sigma(t, p1, a)[0], model.ell(t, p1, a)[0], model.g(t, p1)[0])
        vals2 = (model.b(t, p2, a)[0], model.sigma(t, p2, a)[0], model.ell(t, p2, a)[0], model.g(t, p2)[0])
        r1 = np.linalg.norm(p1)
        for key, v1, v2, power in zip(lip, vals1, vals2, (1, 1, 2, 2)):
            lip[key] = max(lip[key], float(np.linalg.norm(np.atleast_1d(v1 - v2))) / dx)
            grow[key] = max(grow[key], float(np.linalg.norm(np.atleast_1d(v1))) / (1 + r1**power))
    return AssumptionReport(sample_count, lip, grow)


# -- built-in scenarios -----------------------------------------------------


def _parabola_drift(t, x, a):
    return np.full(x.shape, -2.0 * (t - 1.0))


def _parabola_diffusion(t, x, a):
    return np.maximum(2.0 * t - x, 0.0)[:, :, None]


def _one(t, x, a):
    return np.ones(x.shape[0])


BUILTIN_SCENARIOS = ("example41_deterministic", "example41_stochastic")


def builtin_scenario(name: str):
    """Return ``(model, domain, control_set)`` for a named scenario.

    Both scenarios live on Q = [0, 2) x (-1, 1) with unit running cost and
    zero terminal cost, so the value is the expected remaining time
    ``E[(tau ^ 2) - t]``.  The stochastic one adds the noise ``(2s - X)^+ dW``.
    """
    if name not in BUILTIN_SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; expected one of {BUILTIN_SCENARIOS}")
    diffusion = _parabola_diffusion if name == "example41_stochastic" else None
    model = SdeModel(1, 1, 1, _parabola_drift, diffusion, _one, _zero_terminal, _zero_terminal_derivs, name=name)
    domain = SpaceTimeDomain(interval(-1.0, 1.0), 2.0)
    return model, domain, ControlSet.singleton(0.0)


def parabola_flow(t: float, x: float, s):
    """Closed-form deterministic flow ``-(s-1)^2 + x + (t-1)^2``."""
    return -((np.asarray(s) - 1.0) ** 2) + x + (t - 1.0) ** 2


def parabola_exit_time(t: float, x: float, horizon: float = 2.0) -> float:
    """Closed-form exit time of the deterministic flow from (-1, 1), capped at the horizon."""
    if abs(x) >= 1.0:
        return t
    c = x + (t - 1.0) ** 2
    if t < 1.0 and c >= 1.0:
        # first crossing of +1 on the rising branch
        return min(1.0 - np.sqrt(c - 1.0), horizon)
    return min(1.0 + np.sqrt(c + 1.0), horizon)
