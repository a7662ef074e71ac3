"""Bounded spatial domains described by their signed distance function.

Conventions: the signed distance is negative inside the open set, zero on its
boundary and positive outside its closure.  Points are arrays of shape
``(n,)`` or batches of shape ``(m, n)``.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

DEFAULT_BOUNDARY_TOL = 1e-9
DEFAULT_FD_STEP = 1e-5
TIME_TOL = 1e-12


class Region(str, enum.Enum):
    INTERIOR = "interior_Q"
    LATERAL = "lateral_boundary"
    TERMINAL = "terminal_face"
    EXTERIOR = "exterior"


class GeometryWarning(UserWarning):
    """Finite-difference derivatives of the signed distance look inaccurate."""


def _as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim <= 1
    arr = arr.reshape(-1, dim) if single else arr
    if arr.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {np.shape(x)}")
    return arr, single


@dataclass(frozen=True)
class SpaceDomain:
    """Bounded open set O, represented by its signed distance.

    ``rho`` maps a batch ``(m, n)`` to ``(m,)``.  ``grad_hess_fn``, when given,
    maps a batch to ``((m, n), (m, n, n))``; otherwise derivatives come from
    central finite differences with step ``fd_step``.
    """

    dim: int
    rho: Callable[[np.ndarray], np.ndarray]
    kind: str = "custom"
    params: dict = field(default_factory=dict)
    grad_hess_fn: Optional[Callable] = None
    boundary_tolerance: float = DEFAULT_BOUNDARY_TOL
    fd_step: float = DEFAULT_FD_STEP
    bounds: Optional[tuple[np.ndarray, np.ndarray]] = None
    boundary_sampler: Optional[Callable[[int], np.ndarray]] = None

    @property
    def grad_mode(self) -> str:
        return "analytic" if self.grad_hess_fn is not None else "finite-difference"

    @property
    def is_box(self) -> bool:
        return self.kind in ("interval", "box")

    def signed_distance(self, x) -> np.ndarray | float:
        pts, single = _as_batch(x, self.dim)
        out = np.asarray(self.rho(pts), dtype=float).reshape(-1)
        return float(out[0]) if single else out

    def distance_plus(self, x) -> np.ndarray | float:
        r = self.signed_distance(x)
        return max(r, 0.0) if isinstance(r, float) else np.maximum(r, 0.0)

    def grad_hess(self, x, check: bool = True):
        """Return ``(D rho, D^2 rho)`` at ``x``.

        With finite differences, a ``GeometryWarning`` is issued when
        ``check`` is set and a point within ``100 * fd_step`` of the boundary
        has ``|‖D rho‖ - 1| > 10 * fd_step``.
        """
        pts, single = _as_batch(x, self.dim)
        if self.grad_hess_fn is not None:
            grad, hess = self.grad_hess_fn(pts)
        else:
            grad, hess = fd_grad_hess(self.rho, pts, self.fd_step)
            if check:
                near = np.abs(self.rho(pts)) <= 100 * self.fd_step
                dev = np.abs(np.linalg.norm(grad, axis=1) - 1.0)
                if np.any(near & (dev > 10 * self.fd_step)):
                    warnings.warn(
                        f"|‖Dρ‖ - 1| = {dev[near].max():.2e} near the boundary; "
                        "finite-difference derivatives may be degraded",
                        GeometryWarning,
                        stacklevel=2,
                    )
        grad = np.asarray(grad, dtype=float)
        hess = np.asarray(hess, dtype=float)
        if single:
            return grad[0], hess[0]
        return grad, hess

    def project_to_boundary(self, x: np.ndarray) -> np.ndarray:
        """Nearest-point projection ``x - rho(x) D rho(x)`` (exact for built-ins)."""
        pts, _ = _as_batch(x, self.dim)
        r = self.rho(pts)
        g, _ = self.grad_hess(pts, check=False)
        return pts - r[:, None] * g

    def sample_boundary(self, count: int) -> np.ndarray:
        if self.boundary_sampler is None:
            raise ValueError(f"domain kind {self.kind!r} has no boundary sampler")
        return self.boundary_sampler(count)


@dataclass(frozen=True)
class SpaceTimeDomain:
    """Q = [0, T) x O together with its parabolic boundary."""

    space: SpaceDomain
    horizon: float

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def dim(self) -> int:
        return self.space.dim

    def classify(self, t: float, x) -> Region:
        if t < -TIME_TOL or t > self.horizon + TIME_TOL:
            raise ValueError(f"t={t} outside [0, {self.horizon}]")
        r = self.space.signed_distance(x)
        tol = self.space.boundary_tolerance
        if abs(t - self.horizon) <= TIME_TOL:
            return Region.TERMINAL if r <= tol else Region.EXTERIOR
        if r < -tol:
            return Region.INTERIOR
        if abs(r) <= tol:
            return Region.LATERAL
        return Region.EXTERIOR


def signed_distance(domain: SpaceDomain | SpaceTimeDomain, x):
    return _space(domain).signed_distance(x)


def distance_plus(domain: SpaceDomain | SpaceTimeDomain, x):
    return _space(domain).distance_plus(x)


def grad_hess(domain: SpaceDomain | SpaceTimeDomain, x):
    return _space(domain).grad_hess(x)


def classify(domain: SpaceTimeDomain, t: float, x) -> Region:
    return domain.classify(t, x)


def _space(domain) -> SpaceDomain:
    return domain.space if isinstance(domain, SpaceTimeDomain) else domain


def fd_grad_hess(rho, pts: np.ndarray, h: float):
    """Central differences for gradient and Hessian of a batched scalar field."""
    m, n = pts.shape
    eye = np.eye(n) * h
    f0 = rho(pts)
    grad = np.empty((m, n))
    hess = np.empty((m, n, n))
    fp = [rho(pts + eye[i]) for i in range(n)]
    fm = [rho(pts - eye[i]) for i in range(n)]
    for i in range(n):
        grad[:, i] = (fp[i] - fm[i]) / (2 * h)
        hess[:, i, i] = (fp[i] - 2 * f0 + fm[i]) / h**2
        for j in range(i + 1, n):
            fpp = rho(pts + eye[i] + eye[j])
            fpm = rho(pts + eye[i] - eye[j])
            fmp = rho(pts - eye[i] + eye[j])
            fmm = rho(pts - eye[i] - eye[j])
            hess[:, i, j] = hess[:, j, i] = (fpp - fpm - fmp + fmm) / (4 * h**2)
    return grad, hess


# -- built-in domains -------------------------------------------------------


def box(lo, hi, *, analytic: bool = True, boundary_tolerance: float = DEFAULT_BOUNDARY_TOL,
        fd_step: float = DEFAULT_FD_STEP) -> SpaceDomain:
    """Open hyperrectangle ``prod (lo_i, hi_i)``.

    The signed distance is only piecewise C^2 (corners and the medial set);
    derivatives returned there are one-sided choices.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ValueError("box needs lo < hi componentwise")
    n = lo.size
    c = (lo + hi) / 2
    half = (hi - lo) / 2

    if n == 1:
        lo0, hi0 = float(lo[0]), float(hi[0])

        def rho(x):
            # same formula, fewer temporaries in 1-D
            x0 = x[:, 0]
            return np.maximum(lo0 - x0, x0 - hi0)
    else:
        def rho(x):
            q = np.abs(x - c) - half
            outside = np.sqrt(np.sum(np.maximum(q, 0.0) ** 2, axis=1))
            inside = np.minimum(q.max(axis=1), 0.0)
            return outside + inside

    def gh(x):
        d = x - c
        s = np.where(d >= 0, 1.0, -1.0)
        q = np.abs(d) - half
        qp = np.maximum(q, 0.0)
        out_norm = np.sqrt(np.sum(qp**2, axis=1))
        grad = np.zeros_like(x)
        hess = np.zeros((x.shape[0], n, n))
        ins = out_norm == 0.0
        if np.any(ins):
            k = np.argmax(q[ins], axis=1)
            rows = np.nonzero(ins)[0]
            grad[rows, k] = s[rows, k]
        out = ~ins
        if np.any(out):
            u = qp[out] / out_norm[out, None]
            grad[out] = u * s[out]
            # distance to a face/edge/corner: curvature only along active axes
            active = (q[out] > 0).astype(float)
            proj = np.einsum("mi,mj->mij", u, u)
            hess[out] = (active[:, :, None] * np.eye(n) * active[:, None, :] - proj) / out_norm[out, None, None]
            hess[out] *= np.einsum("mi,mj->mij", s[out], s[out])
        return grad, hess

    def sampler(count: int) -> np.ndarray:
        if n == 1:
            return np.array([[lo[0]], [hi[0]]])
        per_face = max(1, count // (2 * n))
        pts = []
        for axis in range(n):
            for val in (lo[axis], hi[axis]):
                u = (np.arange(per_face) + 0.5) / per_face
                p = np.tile(c, (per_face, 1))
                other = [i for i in range(n) if i != axis]
                # diagonal sweep over the face interior, away from corners
                for i in other:
                    p[:, i] = lo[i] + (hi[i] - lo[i]) * u
                p[:, axis] = val
                pts.append(p)
        return np.vstack(pts)

    kind = "interval" if n == 1 else "box"
    return SpaceDomain(
        dim=n, rho=rho, kind=kind, params={"lo": lo.tolist(), "hi": hi.tolist()},
        grad_hess_fn=gh if analytic else None, boundary_tolerance=boundary_tolerance,
        fd_step=fd_step, bounds=(lo, hi), boundary_sampler=sampler,
    )


def interval(lo: float = -1.0, hi: float = 1.0, **kw) -> SpaceDomain:
    return box([lo], [hi], **kw)


def ball(center, radius: float, *, analytic: bool = True,
         boundary_tolerance: float = DEFAULT_BOUNDARY_TOL, fd_step: float = DEFAULT_FD_STEP) -> SpaceDomain:
    center = np.atleast_1d(np.asarray(center, dtype=float))
    n = center.size
    if radius <= 0:
        raise ValueError("radius must be positive")

    def rho(x):
        return np.linalg.norm(x - center, axis=1) - radius

    def gh(x):
        d = x - center
        r = np.linalg.norm(d, axis=1)
        r = np.where(r == 0.0, np.finfo(float).tiny, r)
        u = d / r[:, None]
        hess = (np.eye(n)[None] - np.einsum("mi,mj->mij", u, u)) / r[:, None, None]
        return u, hess

    def sampler(count: int) -> np.ndarray:
        if n == 1:
            return center + np.array([[-radius], [radius]])
        if n == 2:
            ang = 2 * np.pi * np.arange(count) / count
            return center + radius * np.column_stack([np.cos(ang), np.sin(ang)])
        # deterministic Fibonacci-style points on the sphere for n = 3
        i = np.arange(count) + 0.5
        phi = np.arccos(1 - 2 * i / count)
        theta = np.pi * (1 + 5**0.5) * i
        dirs = np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])
        if n != 3:
            raise ValueError("ball boundary sampling supports n <= 3")
        return center + radius * dirs

    return SpaceDomain(
        dim=n, rho=rho, kind="ball", params={"center": center.tolist(), "radius": radius},
        grad_hess_fn=gh if analytic else None, boundary_tolerance=boundary_tolerance,
        fd_step=fd_step, bounds=(center - radius, center + radius), boundary_sampler=sampler,
    )


def custom(dim: int, rho: Callable[[np.ndarray], np.ndarray], bounds=None, **kw) -> SpaceDomain:
    """User-supplied signed distance; derivatives by finite differences unless given."""
    if bounds is not None:
        bounds = (np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float))
    return SpaceDomain(dim=dim, rho=rho, kind="custom", bounds=bounds, **kw)


def lipschitz_ratio(domain: SpaceDomain, count: int = 1000, seed: int = 0, pad: float = 0.5) -> float:
    """Largest observed ``|rho(x1) - rho(x2)| / ‖x1 - x2‖`` over random pairs."""
    if domain.bounds is None:
        raise ValueError("domain has no bounding box to sample from")
    lo, hi = domain.bounds
    rng = np.random.default_rng(seed)
    span = hi - lo
    x1 = rng.uniform(lo - pad * span, hi + pad * span, size=(count, domain.dim))
    x2 = rng.uniform(lo - pad * span, hi + pad * span, size=(count, domain.dim))
    num = np.abs(domain.rho(x1) - domain.rho(x2))
    den = np.linalg.norm(x1 - x2, axis=1)
    return float(np.max(num / den))
