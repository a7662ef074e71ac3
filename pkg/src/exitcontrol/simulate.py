"""Euler-Maruyama simulation of controlled paths with first-exit detection.

Two modes share one engine:

* stopped   -- each path is killed at the first grid time with rho >= 0, or at
               the horizon; running cost is accumulated up to that time.
* penalized -- paths run on all of R^n up to the horizon while the integral of
               the outside distance d = rho^+ is accumulated, so the
               soft-killing factor exp(-(1/eps) * int d) can be applied for any
               list of eps.  The first-exit data of the same path is recorded
               as well.

Several starting points can be simulated together; path ``i`` of every start
receives the same Brownian increments (common random numbers).
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import SpaceTimeDomain
from .model import Policy, SdeModel, shifted_model
from .rng import block_generator, block_slices

LATERAL = 0
TERMINAL = 1
EXIT_MODES = ("grid_point", "bridge_corrected")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    n_paths: int = 100_000
    seed: int = 0
    exit_detection: str = "grid_point"
    block_size: int = 8192
    workers: Optional[int] = None
    project_exit: bool = True
    clip_box: Optional[tuple] = None
    record_paths: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if self.exit_detection not in EXIT_MODES:
            raise ValueError(f"exit_detection must be one of {EXIT_MODES}")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")

    def replace(self, **kw) -> "SimConfig":
        from dataclasses import replace

        return replace(self, **kw)

    @property
    def n_workers(self) -> int:
        return self.workers or os.cpu_count() or 1


@dataclass
class PathBatch:
    start_t: float
    start_x: np.ndarray
    policy: str
    dt: float
    seed: int
    exit_time: np.ndarray
    exit_state: np.ndarray
    exit_face: np.ndarray
    running_cost: np.ndarray
    terminal_cost: np.ndarray
    lambda_log_integral: np.ndarray
    clipped: np.ndarray
    eps: tuple = ()
    penalized_cost: Optional[np.ndarray] = None
    final_state: Optional[np.ndarray] = None
    final_terminal_cost: Optional[np.ndarray] = None
    max_separation: Optional[np.ndarray] = None
    times: Optional[np.ndarray] = None
    paths: Optional[np.ndarray] = None
    ell_samples: Optional[np.ndarray] = None
    dplus_integral: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return self.exit_time.shape[0]

    @property
    def total_cost(self) -> np.ndarray:
        return self.running_cost + self.terminal_cost

    def lambda_factor(self, eps: float) -> np.ndarray:
        """Soft-killing factor at the horizon, for any eps > 0."""
        if eps <= 0:
            raise ValueError("eps must be positive")
        return np.exp(-self.lambda_log_integral / eps)

    def penalized_for(self, eps: float) -> np.ndarray:
        """Per-path penalized cost for ``eps``.

        Exact for any eps when paths were recorded; otherwise ``eps`` must be
        one of the values simulated.
        """
        if eps in self.eps:
            return self.penalized_cost[:, self.eps.index(eps)]
        if self.paths is None:
            raise ValueError(f"eps={eps} not simulated and paths were not recorded")
        h = np.diff(self.times)
        lam = np.exp(-self.dplus_integral / eps)
        return np.sum(lam[:, :-1] * self.ell_samples * h, axis=1) + lam[:, -1] * self.final_terminal_cost


# -- engine -----------------------------------------------------------------


@dataclass
class _Job:
    model: SdeModel
    policy: Policy
    rho: Callable[[np.ndarray], np.ndarray]
    starts_t: np.ndarray
    starts_x: np.ndarray
    start_k: np.ndarray
    times: np.ndarray
    cfg: SimConfig
    mode: str
    strict: bool = False
    eps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    boundary_tol: float = 0.0
    projector: Optional[Callable] = None
    grad: Optional[Callable] = None
    separation: bool = False


def time_grid(t0: float, t_end: float, dt: float) -> np.ndarray:
    """Grid anchored at ``t0`` with a final partial step landing on ``t_end``."""
    span = t_end - t0
    if span <= 0:
        return np.array([t0])
    k = max(1, math.ceil(span / dt - 1e-9))
    times = t0 + dt * np.arange(k + 1)
    times[-1] = t_end
    return times


def _group_starts(starts_t: np.ndarray, dt: float) -> list[np.ndarray]:
    """Partition start indices into groups whose times share a dt-grid."""
    order = np.argsort(starts_t, kind="stable")
    groups: list[list[int]] = []
    for i in order:
        for g in groups:
            q = (starts_t[i] - starts_t[g[0]]) / dt
            if abs(q - round(q)) <= 1e-7:
                g.append(i)
                break
        else:
            groups.append([i])
    return [np.array(g) for g in groups]


def _clip(cfg: SimConfig, x: np.ndarray):
    if cfg.clip_box is None:
        return x, None
    lo, hi = (np.asarray(v, float) for v in cfg.clip_box)
    xc = np.clip(x, lo, hi)
    return xc, np.any(xc != x, axis=1)


def _bridge_prob(job: _Job, t, xa, a, rho_old, rho_new, h):
    grad, _ = job.grad(xa)
    sig = job.model.sigma(t, xa, a)
    v = np.sum(np.einsum("mij,mi->mj", sig, grad) ** 2, axis=1)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        p = np.exp(-2.0 * rho_old * rho_new / (v * h))
    return np.where(v > 0, p, 0.0)


def _run_block_stopped(job: _Job, block: int, lo: int, hi: int) -> dict:
    model, cfg = job.model, job.cfg
    B = hi - lo
    S, n = job.starts_x.shape
    R = S * B
    rng = block_generator(cfg.seed, block)
    times = job.times
    K = len(times) - 1
    t_end = times[-1]
    bridge = cfg.exit_detection == "bridge_corrected"

    exit_time = np.empty(R)
    exit_state = np.empty((R, n))
    face = np.empty(R, dtype=np.int8)
    run_cost = np.zeros(R)
    term_cost = np.empty(R)
    clipped = np.zeros(R, dtype=bool)

    rows = np.zeros(0, dtype=np.int64)
    xa = np.zeros((0, n))
    ca = np.zeros(0)
    ra = np.zeros(0)
    joiners = {}
    for s in range(S):
        joiners.setdefault(int(job.start_k[s]), []).append(s)

    def finish(sel_rows, t, states, fcode, costs):
        exit_time[sel_rows] = t
        face[sel_rows] = fcode
        if fcode == LATERAL and job.projector is not None:
            states = job.projector(states)
        exit_state[sel_rows] = states
        run_cost[sel_rows] = costs
        term_cost[sel_rows] = model.g(t, states)

    for k in range(K + 1):
        for s in joiners.get(k, ()):
            r = np.arange(s * B, (s + 1) * B)
            x0 = np.broadcast_to(job.starts_x[s], (B, n)).copy()
            r0 = job.rho(x0[:1])[0]
            t0 = job.starts_t[s]
            if (r0 > 0) if job.strict else (r0 >= -job.boundary_tol):
                finish(r, t0, x0, LATERAL, 0.0)
            elif t0 >= t_end - 1e-12:
                finish(r, t0, x0, TERMINAL, 0.0)
            else:
                rows = np.concatenate([rows, r])
                xa = np.concatenate([xa, x0])
                ca = np.concatenate([ca, np.zeros(B)])
                ra = np.concatenate([ra, np.full(B, r0)])
        if k == K:
            break
        t = times[k]
        h = times[k + 1] - t
        dw = None if model.deterministic else rng.standard_normal((B, model.dim_noise)) * math.sqrt(h)
        u = rng.random(B) if bridge else None
        if rows.size == 0:
            continue
        a = job.policy(t, xa)
        ca = ca + model.ell(t, xa, a) * h
        xn = xa + model.b(t, xa, a) * h
        if dw is not None:
            sig = model.sigma(t, xa, a)
            xn = xn + np.einsum("mij,mj->mi", sig, dw[rows % B])
        xn, clip_flags = _clip(cfg, xn)
        if clip_flags is not None:
            clipped[rows] |= clip_flags
        rn = job.rho(xn)
        ex = rn > 0 if job.strict else rn >= 0
        if bridge and dw is not None:
            p = _bridge_prob(job, t, xa, a, ra, rn, h)
            ex |= (~ex) & (u[rows % B] < p)
        if ex.any():
            finish(rows[ex], times[k + 1], xn[ex], LATERAL, ca[ex])
            keep = ~ex
            rows, xn, ca, rn = rows[keep], xn[keep], ca[keep], rn[keep]
        xa, ra = xn, rn
        if k == K - 1 and rows.size:
            finish(rows, t_end, xa, TERMINAL, ca)
            rows = rows[:0]

    zeros = np.zeros(R)
    return dict(exit_time=exit_time, exit_state=exit_state, exit_face=face, running_cost=run_cost,
                terminal_cost=term_cost, lambda_log_integral=zeros, clipped=clipped)


def _run_block_penalized(job: _Job, block: int, lo: int, hi: int) -> dict:
    model, cfg = job.model, job.cfg
    B = hi - lo
    S, n = job.starts_x.shape
    R = S * B
    E = job.eps.size
    rng = block_generator(cfg.seed, block)
    times = job.times
    K = len(times) - 1
    t_end = times[-1]
    record = cfg.record_paths

    x = np.repeat(job.starts_x, B, axis=0)
    start_k = np.repeat(job.start_k, B)
    integral = np.zeros(R)
    pen = np.zeros((R, E))
    run_cost = np.zeros(R)
    exited = np.zeros(R, dtype=bool)
    exit_time = np.full(R, t_end)
    exit_state = np.empty((R, n))
    face = np.full(R, TERMINAL, dtype=np.int8)
    term_cost = np.zeros(R)
    clipped = np.zeros(R, dtype=bool)
    sep = np.zeros(R) if job.separation else None
    noise_rows = np.tile(np.arange(B), S)
    if sep is not None:
        sep = np.linalg.norm(x.reshape(S, B, n) - x[:B][None], axis=2).reshape(R)
    inv_eps = 1.0 / job.eps
    if record:
        rec_x = np.empty((R, K + 1, n))
        rec_l = np.zeros((R, K))
        rec_i = np.zeros((R, K + 1))
        rec_x[:, 0] = x

    # starts sharing a grid join in order of start_k; sorted so active rows form a prefix
    def mark_exit(sel, t, states):
        exited[sel] = True
        exit_time[sel] = t
        face[sel] = LATERAL
        if job.projector is not None:
            states = job.projector(states)
        exit_state[sel] = states
        term_cost[sel] = model.g(t, states)

    for s in range(S):
        r0 = job.rho(job.starts_x[s : s + 1])[0]
        if r0 >= -job.boundary_tol:
            sl = slice(s * B, (s + 1) * B)
            mark_exit(np.arange(s * B, (s + 1) * B), job.starts_t[s], x[sl])

    for k in range(K):
        t = times[k]
        h = times[k + 1] - t
        dw = None if model.deterministic else rng.standard_normal((B, model.dim_noise)) * math.sqrt(h)
        m = int(np.searchsorted(start_k, k, side="right"))
        if m == 0:
            continue
        xa = x[:m]
        a = job.policy(t, xa)
        lh = model.ell(t, xa, a) * h
        if E:
            pen[:m] += np.exp(-integral[:m, None] * inv_eps[None, :]) * lh[:, None]
        live = ~exited[:m]
        run_cost[:m] += np.where(live, lh, 0.0)
        integral[:m] += np.maximum(job.rho(xa), 0.0) * h
        xn = xa + model.b(t, xa, a) * h
        if dw is not None:
            xn = xn + np.einsum("mij,mj->mi", model.sigma(t, xa, a), dw[noise_rows[:m]])
        xn, clip_flags = _clip(cfg, xn)
        if clip_flags is not None:
            clipped[:m] |= clip_flags
        newly = live & (job.rho(xn) >= 0)
        if newly.any():
            mark_exit(np.nonzero(newly)[0], times[k + 1], xn[newly])
        x[:m] = xn
        if record:
            rec_x[:m, k + 1] = xn
            rec_x[m:, k + 1] = x[m:]
            rec_l[:m, k] = lh / h
            rec_i[:, k + 1] = integral
        if sep is not None and m == R:
            d = np.linalg.norm(x.reshape(S, B, n) - x[:B][None], axis=2).reshape(R)
            np.maximum(sep, d, out=sep)

    g_final = model.g(t_end, x)
    if E:
        pen += np.exp(-integral[:, None] * inv_eps[None, :]) * g_final[:, None]
    rest = ~exited
    exit_state[rest] = x[rest]
    term_cost[rest] = g_final[rest]
    out = dict(exit_time=exit_time, exit_state=exit_state, exit_face=face, running_cost=run_cost,
               terminal_cost=term_cost, lambda_log_integral=integral, clipped=clipped,
               penalized_cost=pen, final_state=x, final_terminal_cost=g_final)
    if sep is not None:
        out["max_separation"] = sep
    if record:
        out.update(paths=rec_x, ell_samples=rec_l, dplus_integral=rec_i)
    return out


def _run(job: _Job) -> list[dict]:
    """Run all blocks and return one dict of per-path arrays per start."""
    cfg = job.cfg
    runner = _run_block_stopped if job.mode == "stopped" else _run_block_penalized
    if job.model.deterministic and cfg.n_paths > 1:
        # noise-free: every path coincides, integrate one and replicate
        single = _run(_replace_cfg(job, n_paths=1))
        return [{k: np.repeat(v, cfg.n_paths, axis=0) for k, v in d.items()} for d in single]
    slices = block_slices(cfg.n_paths, cfg.block_size)
    tasks = [(b, lo, hi) for b, (lo, hi) in enumerate(slices)]
    if cfg.n_workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(cfg.n_workers) as pool:
            parts = list(pool.map(lambda t: runner(job, *t), tasks))
    else:
        parts = [runner(job, *t) for t in tasks]
    S = job.starts_x.shape[0]
    out = []
    for s in range(S):
        merged = {}
        for key in parts[0]:
            chunks = []
            for (b, lo, hi), part in zip(tasks, parts):
                B = hi - lo
                chunks.append(part[key][s * B : (s + 1) * B])
            merged[key] = np.concatenate(chunks)
        out.append(merged)
    return out


def _replace_cfg(job: _Job, **kw) -> _Job:
    from dataclasses import replace

    return replace(job, cfg=job.cfg.replace(**kw))


def _validate_cfg(cfg: SimConfig, domain: SpaceTimeDomain):
    if cfg.dt > domain.horizon:
        raise ValueError("dt must not exceed the horizon")


def _simulate_many(model, domain: SpaceTimeDomain, policy: Policy, starts, cfg: SimConfig, mode: str,
                   eps: Sequence[float] = (), separation: bool = False) -> list[PathBatch]:
    _validate_cfg(cfg, domain)
    starts_t = np.array([float(s[0]) for s in starts])
    starts_x = np.array([np.atleast_1d(np.asarray(s[1], float)) for s in starts]).reshape(len(starts), model.dim_state)
    if np.any(starts_t < -1e-12) or np.any(starts_t > domain.horizon + 1e-12):
        raise ValueError("start times must lie in [0, T]")
    eps_arr = np.asarray(eps, float)
    if np.any(eps_arr <= 0):
        raise ValueError("eps values must be positive")
    space = domain.space
    projector = space.project_to_boundary if cfg.project_exit else None
    grad = (lambda p: space.grad_hess(p, check=False)) if cfg.exit_detection == "bridge_corrected" else None
    results: list[Optional[PathBatch]] = [None] * len(starts)
    for group in _group_starts(starts_t, cfg.dt):
        t0 = starts_t[group[0]]
        times = time_grid(t0, domain.horizon, cfg.dt)
        k = np.rint((starts_t[group] - t0) / cfg.dt).astype(np.int64)
        k = np.minimum(k, len(times) - 1)
        job = _Job(model, policy, space.rho, starts_t[group], starts_x[group], k, times, cfg, mode,
                   eps=eps_arr, boundary_tol=space.boundary_tolerance if mode == "stopped" else 0.0,
                   projector=projector, grad=grad, separation=separation)
        for i, arrays in zip(group, _run(job)):
            results[i] = PathBatch(
                start_t=float(starts_t[i]), start_x=starts_x[i], policy=policy.name, dt=cfg.dt, seed=cfg.seed,
                eps=tuple(float(e) for e in eps_arr), times=times if cfg.record_paths else None, **arrays,
            )
    return results


def simulate_stopped(model: SdeModel, domain: SpaceTimeDomain, policy: Policy, start, cfg: SimConfig) -> PathBatch:
    """Simulate paths killed at the first exit of (s, X_s) from Q.

    A start outside Q (or on its parabolic boundary) exits immediately with
    zero running cost.
    """
    return _simulate_many(model, domain, policy, [start], cfg, "stopped")[0]


def simulate_stopped_many(model, domain, policy, starts, cfg) -> list[PathBatch]:
    return _simulate_many(model, domain, policy, starts, cfg, "stopped")


def simulate_penalized(model: SdeModel, domain: SpaceTimeDomain, policy: Policy, start, cfg: SimConfig,
                       eps: Sequence[float] = (), with_shifted_cost: bool = False) -> PathBatch:
    """Simulate unkilled paths to the horizon, accumulating penalized costs for each ``eps``."""
    if with_shifted_cost:
        model = shifted_model(model)
    return _simulate_many(model, domain, policy, [start], cfg, "penalized", eps)[0]


def simulate_penalized_many(model, domain, policy, starts, cfg, eps=(), with_shifted_cost=False,
                            separation=False) -> list[PathBatch]:
    if with_shifted_cost:
        model = shifted_model(model)
    return _simulate_many(model, domain, policy, starts, cfg, "penalized", eps, separation)


def crn_pair(model, domain, policy, start1, start2, cfg: SimConfig, mode: str = "stopped",
             eps: Sequence[float] = ()) -> tuple[PathBatch, PathBatch]:
    """Two batches driven by identical Brownian increments per path index.

    In penalized mode the second batch carries ``max_separation``, the
    per-path sup over the grid of ‖X1 - X2‖ (when both starts share a time).
    """
    if mode == "stopped":
        b1, b2 = _simulate_many(model, domain, policy, [start1, start2], cfg, "stopped")
    else:
        b1, b2 = _simulate_many(model, domain, policy, [start1, start2], cfg, "penalized", eps, separation=True)
    return b1, b2


def simulate_window(model: SdeModel, rho: Callable, policy: Policy, t0: float, x0, t_end: float,
                    cfg: SimConfig, strict: bool = False) -> PathBatch:
    """Stopped simulation for an arbitrary region ``{rho < 0}`` over ``[t0, t_end]``.

    With ``strict`` a path counts as exited only where ``rho > 0``; the start
    itself is then allowed on the boundary.
    """
    x0 = np.atleast_1d(np.asarray(x0, float))
    times = time_grid(t0, t_end, cfg.dt)
    job = _Job(model, policy, rho, np.array([t0]), x0[None, :], np.zeros(1, dtype=np.int64), times,
               cfg.replace(exit_detection="grid_point"), "stopped", strict=strict)
    arrays = _run(job)[0]
    return PathBatch(start_t=t0, start_x=x0, policy=policy.name, dt=cfg.dt, seed=cfg.seed, **arrays)


# -- path dumps ---------------------------------------------------------------

DUMP_MAGIC = b"EXPB"
DUMP_VERSION = 1


def _record_dtype(n: int) -> np.dtype:
    return np.dtype([("exit_time", "<f8"), ("exit_face", "<i1"), ("running_cost", "<f8"),
                     ("terminal_cost", "<f8"), ("lambda_log_integral", "<f8"), ("exit_state", "<f8", (n,))])


def write_path_dump(batch: PathBatch, path) -> None:
    """Binary dump: magic, version, JSON header length + header, packed per-path records."""
    n = batch.exit_state.shape[1]
    header = json.dumps({
        "dims": n, "dt": batch.dt, "n_paths": batch.n_paths, "seed": batch.seed,
        "start_t": batch.start_t, "start_x": batch.start_x.tolist(), "policy": batch.policy,
    }).encode()
    rec = np.empty(batch.n_paths, dtype=_record_dtype(n))
    for key in ("exit_time", "exit_face", "running_cost", "terminal_cost", "lambda_log_integral", "exit_state"):
        rec[key] = getattr(batch, key)
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC + struct.pack("<HI", DUMP_VERSION, len(header)) + header)
        fh.write(rec.tobytes())


def read_path_dump(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DUMP_MAGIC:
        raise ValueError("not a path dump")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != DUMP_VERSION:
        raise ValueError(f"unsupported path-dump version {version}")
    header = json.loads(raw[10 : 10 + hlen])
    rec = np.frombuffer(raw[10 + hlen :], dtype=_record_dtype(header["dims"]))
    return header, rec


def summary_csv(batch: PathBatch) -> str:
    buf = io.StringIO()
    buf.write("path,tau,exit_face,running_cost,terminal_cost,total_cost\n")
    faces = np.where(batch.exit_face == LATERAL, "lateral", "terminal")
    for i in range(batch.n_paths):
        buf.write(f"{i},{batch.exit_time[i]!r},{faces[i]},{batch.running_cost[i]!r},"
                  f"{batch.terminal_cost[i]!r},{batch.total_cost[i]!r}\n")
    return buf.getvalue()
