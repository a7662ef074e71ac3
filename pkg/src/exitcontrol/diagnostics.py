"""Statistical probes of boundary behaviour, penalization and continuity.

Every probe returns a result object whose ``record()`` is a JSON-ready dict
``{test, inputs, statistic, threshold, pass}``; ``append_session_csv``
collects records (and curve points for the Dini and jump probes) in one CSV.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import SpaceTimeDomain
from .model import ConstantPolicy, ControlSet, Policy, SdeModel
from .regularity import evaluate_exit_condition
from .rng import block_generator, block_slices
from .simulate import LATERAL, SimConfig, _simulate_many, simulate_window, time_grid
from .value import Z95, summarize

DISCRETE_EXIT_CONSTANT = 2.0


def discrete_exit_threshold(delta: float, dt: float, c: float = DISCRETE_EXIT_CONSTANT) -> float:
    """Pass threshold ``1 - c * (delta/dt)^(-1/2)`` for a sup sampled on ``delta/dt`` grid times."""
    n = max(1, int(round(delta / dt)))
    return max(0.0, 1.0 - c / math.sqrt(n))


class RegimeError(ValueError):
    """Raised when l >= 0 and g = 0 fail on samples; apply the g-shift first."""


def _record(test, inputs, statistic, threshold, passed, **extra):
    out = {"test": test, "inputs": inputs, "statistic": statistic, "threshold": threshold, "pass": bool(passed)}
    out.update(extra)
    return out


def _policy_for(controls: ControlSet, a) -> ConstantPolicy:
    if isinstance(a, (int, np.integer)):
        return ConstantPolicy(controls, int(a))
    a = np.atleast_1d(np.asarray(a, float))
    hits = np.nonzero(np.all(np.isclose(controls.points, a), axis=1))[0]
    if hits.size == 0:
        raise ValueError(f"control {a.tolist()} is not in the control set")
    return ConstantPolicy(controls, int(hits[0]))


# -- immediate exit -----------------------------------------------------------


@dataclass
class ExitFraction:
    test: str
    fraction: float
    n_paths: int
    threshold: float
    inputs: dict
    condition_holds: Optional[bool] = None

    @property
    def ci_half_width(self) -> float:
        p = self.fraction
        return Z95 * math.sqrt(max(p * (1 - p), 0.0) / self.n_paths)

    @property
    def passed(self) -> bool:
        return self.fraction >= self.threshold

    def record(self) -> dict:
        extra = {} if self.condition_holds is None else {"condition_holds": self.condition_holds}
        return _record(self.test, self.inputs, self.fraction, self.threshold, self.passed, **extra)


def immediate_exit_test(model: SdeModel, domain: SpaceTimeDomain, controls: ControlSet, a, t: float, y,
                        delta: float, cfg: SimConfig, threshold: Optional[float] = None) -> ExitFraction:
    """Fraction of constant-control paths from boundary point ``y`` with rho(Y) > 0 somewhere in (t, t + delta].

    The default pass threshold is :func:`discrete_exit_threshold`.  The
    returned ``condition_holds`` says whether the boundary exit condition
    holds for this control; when it does not, a low fraction is expected.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    policy = _policy_for(controls, a)
    y = np.atleast_1d(np.asarray(y, float))
    report = evaluate_exit_condition(model, domain, controls, t, y)
    holds = policy.index in report.witnesses
    batch = simulate_window(model, domain.space.rho, policy, float(t), y, float(t) + delta, cfg, strict=True)
    frac = float(np.mean(batch.exit_face == LATERAL))
    thr = discrete_exit_threshold(delta, cfg.dt) if threshold is None else float(threshold)
    inputs = {"t": float(t), "y": y.tolist(), "control": policy.name, "delta": delta, "dt": cfg.dt,
              "n_paths": cfg.n_paths, "seed": cfg.seed}
    return ExitFraction("immediate_exit", frac, batch.n_paths, thr, inputs, holds)


def martingale_hitting_test(delta: float, cfg: SimConfig, sigma_hat: Optional[Callable] = None,
                            t: float = 0.0, threshold: Optional[float] = None) -> ExitFraction:
    """Fraction of paths of  M_s = sum sigma_hat(s_k) dB_k  that are positive somewhere on (t, t + delta].

    ``sigma_hat`` maps an array of times to positive values; default
    ``1 + sin(s)^2``.  Path ``i`` uses the same increments whatever
    ``sigma_hat`` is, so two calls with equal ``cfg`` are coupled.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if sigma_hat is None:
        sigma_hat = lambda s: 1.0 + np.sin(s) ** 2  # noqa: E731
    times = time_grid(t, t + delta, cfg.dt)
    scale = np.broadcast_to(np.asarray(sigma_hat(times[:-1]), float), times[:-1].shape)
    if not np.all(scale > 0) or not np.all(np.isfinite(scale)):
        raise ValueError("sigma_hat must be strictly positive and finite on the grid")
    steps = np.sqrt(np.diff(times))
    hit = np.zeros(cfg.n_paths, dtype=bool)
    for b, (lo, hi) in enumerate(block_slices(cfg.n_paths, cfg.block_size)):
        rng = block_generator(cfg.seed, b)
        m = np.zeros(hi - lo)
        seen = np.zeros(hi - lo, dtype=bool)
        for k in range(len(steps)):
            m += scale[k] * steps[k] * rng.standard_normal(hi - lo)
            seen |= m > 0
        hit[lo:hi] = seen
    frac = float(np.mean(hit))
    thr = discrete_exit_threshold(delta, cfg.dt) if threshold is None else float(threshold)
    inputs = {"t": t, "delta": delta, "dt": cfg.dt, "n_steps": len(steps), "n_paths": cfg.n_paths, "seed": cfg.seed}
    return ExitFraction("martingale_hitting", frac, cfg.n_paths, thr, inputs)


# -- dwell time ----------------------------------------------------------------


@dataclass
class DwellTable:
    h: list
    ratios: dict
    min_ratio: list
    lower_bound: float
    inputs: dict

    @property
    def spread(self) -> float:
        """Relative variation (max - min) / max of the min-over-policies ratio across h."""
        r = np.asarray(self.min_ratio)
        return float((r.max() - r.min()) / r.max())

    @property
    def passed(self) -> bool:
        return min(self.min_ratio) > self.lower_bound

    def record(self) -> dict:
        return _record("dwell_time", self.inputs, min(self.min_ratio), self.lower_bound, self.passed,
                       ratios=self.min_ratio, spread=self.spread)


def dwell_time_test(model: SdeModel, domain: SpaceTimeDomain, policies: Sequence[Policy], t: float, x,
                    h_values: Sequence[float], cfg: SimConfig, min_steps: int = 1000,
                    lower_bound: float = 0.0) -> DwellTable:
    """Estimate E[theta - t] / h^2 where theta leaves [t, t + h^2) x B(x, h).

    The step used for each h is ``min(cfg.dt, h^2 / min_steps)`` so the
    window is always resolved by at least ``min_steps`` steps.
    """
    x = np.atleast_1d(np.asarray(x, float))
    hs = [float(h) for h in h_values]
    if not hs or any(not 0 < h < 1 for h in hs):
        raise ValueError("h values must lie in (0, 1)")
    hmax = max(hs)
    space = domain.space
    if float(space.rho(x[None, :])[0]) > -hmax:
        raise ValueError(f"B(x, {hmax}) is not inside the domain")
    if t + hmax**2 >= domain.horizon:
        raise ValueError("t + h^2 must stay below the horizon")
    ratios = {p.name: [] for p in policies}
    for h in hs:
        step = min(cfg.dt, h * h / min_steps)

        def rho(p, c=x, r=h):
            return np.linalg.norm(p - c, axis=1) - r

        for p in policies:
            batch = simulate_window(model, rho, p, t, x, t + h * h, cfg.replace(dt=step))
            ratios[p.name].append(float(np.mean(batch.exit_time - t)) / (h * h))
    mins = [min(ratios[p.name][i] for p in policies) for i in range(len(hs))]
    inputs = {"t": t, "x": x.tolist(), "h": hs, "n_paths": cfg.n_paths, "min_steps": min_steps, "seed": cfg.seed}
    return DwellTable(hs, ratios, mins, lower_bound, inputs)


def brownian_dwell_ratio(terms: int = 200) -> float:
    """E[min(tau, h^2)] / h^2 for standard Brownian motion leaving (-h, h) from 0.

    Series from the eigen-expansion of the survival probability; it does not
    depend on h.
    """
    k = np.arange(terms)
    m = 2 * k + 1
    return float(np.sum(32.0 / np.pi**3 * (-1.0) ** k / m**3 * (1.0 - np.exp(-(m**2) * np.pi**2 / 8.0))))


# -- regime check -----------------------------------------------------------------


def check_regime(model: SdeModel, domain: SpaceTimeDomain, controls: ControlSet, samples: int = 2000,
                 seed: int = 0) -> None:
    """Raise :class:`RegimeError` unless l >= 0 and g == 0 on random samples."""
    rng = np.random.default_rng(seed)
    bounds = domain.space.bounds
    if bounds is None:
        lo, hi = -np.ones(domain.dim), np.ones(domain.dim)
    else:
        lo, hi = (np.atleast_1d(np.asarray(v, float)) for v in bounds)
    pad = 0.25 * (hi - lo)
    x = rng.uniform(lo - pad, hi + pad, size=(samples, domain.dim))
    ts = rng.uniform(0.0, domain.horizon, size=samples)
    bad_l = 0.0
    bad_g = 0.0
    for t in np.unique(np.round(ts, 3))[:50]:
        for a in controls.points:
            aa = np.broadcast_to(a, (samples, a.size))
            bad_l = min(bad_l, float(model.ell(float(t), x, aa).min()))
        bad_g = max(bad_g, float(np.abs(model.g(float(t), x)).max()))
    if bad_l < 0 or bad_g > 0:
        raise RegimeError(f"needs l >= 0 and g = 0 (sampled min l = {bad_l:.3g}, max |g| = {bad_g:.3g}); "
                          "apply the g-shift (shifted_model) first")


# -- Dini curve -----------------------------------------------------------------


@dataclass
class DiniCurve:
    eps: list
    h_hat: list
    ci: list
    argmax: list
    samples: list
    values: np.ndarray
    inputs: dict

    @property
    def monotone(self) -> bool:
        """h_hat nonincreasing along the (decreasing) eps list."""
        return bool(np.all(np.diff(self.h_hat) <= 1e-12))

    def at(self, eps: float) -> tuple[float, float]:
        j = self.eps.index(float(eps))
        return self.h_hat[j], self.ci[j]

    @property
    def passed(self) -> bool:
        return self.monotone

    def record(self) -> dict:
        return _record("dini_curve", self.inputs, self.h_hat, "nonincreasing", self.passed,
                       eps=self.eps, ci=self.ci)

    def csv_rows(self) -> list:
        return [("dini_curve", e, h, c) for e, h, c in zip(self.eps, self.h_hat, self.ci)]


def _best_over_policies(per_policy):
    """Column-wise min of ValueEstimates over policies (ties by name)."""
    return [min(col, key=lambda e: (e.mean, e.ci_half_width, e.policy)) for col in zip(*per_policy)]


def dini_curve(model: SdeModel, domain: SpaceTimeDomain, controls: ControlSet, policies: Sequence[Policy],
               samples, eps: Sequence[float], cfg: SimConfig, check: bool = True) -> DiniCurve:
    """h_hat(eps) = max over boundary samples (t, y) of the penalized estimate.

    All eps values come from the same batch of paths, so the curve is
    monotone path by path when l >= 0 and g = 0.
    """
    eps = [float(e) for e in eps]
    if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("eps must be positive and strictly decreasing")
    if check:
        check_regime(model, domain, controls)
    starts = [(float(s[0]), np.atleast_1d(np.asarray(s[1], float))) for s in samples]
    per_policy = []
    for p in policies:
        batches = _simulate_many(model, domain, p, starts, cfg, "penalized", eps)
        per_policy.append([[summarize(b.penalized_cost[:, j], cfg.dt, p.name) for j in range(len(eps))]
                           for b in batches])
    values = np.empty((len(starts), len(eps)))
    cis = np.empty_like(values)
    for j in range(len(eps)):
        best = _best_over_policies([[row[j] for row in pol] for pol in per_policy])
        values[:, j] = [e.mean for e in best]
        cis[:, j] = [e.ci_half_width for e in best]
    arg = np.argmax(values, axis=0)
    h_hat = [float(values[arg[j], j]) for j in range(len(eps))]
    ci = [float(cis[arg[j], j]) for j in range(len(eps))]
    inputs = {"samples": [(t, x.tolist()) for t, x in starts], "eps": eps, "dt": cfg.dt,
              "n_paths": cfg.n_paths, "seed": cfg.seed}
    return DiniCurve(eps, h_hat, ci, arg.tolist(), inputs["samples"], values, inputs)


# -- sandwich ---------------------------------------------------------------------


@dataclass
class SandwichResult:
    eps: float
    h_hat: float
    h_ci: float
    stopped: list
    penalized: list
    diff_ci: list
    lower_pathwise: float
    inputs: dict

    @property
    def upper_excess(self) -> list:
        """V^eps - V - h_hat at each sample (nonpositive when the upper bound holds)."""
        return [p - s - self.h_hat for s, p in zip(self.stopped, self.penalized)]

    @property
    def combined_ci(self) -> list:
        return [math.hypot(c, self.h_ci) for c in self.diff_ci]

    @property
    def violation(self) -> float:
        """max over samples of max(V - V^eps, V^eps - V - h) minus the combined CI."""
        out = []
        for s, p, up, c in zip(self.stopped, self.penalized, self.upper_excess, self.combined_ci):
            out.append(max(s - p, up) - c)
        return float(max(out))

    @property
    def passed(self) -> bool:
        return self.lower_pathwise <= 0.0 and self.violation <= 0.0

    def record(self) -> dict:
        return _record("sandwich", self.inputs, self.violation, 0.0, self.passed,
                       lower_pathwise=self.lower_pathwise, h_hat=self.h_hat)


def sandwich_test(model: SdeModel, domain: SpaceTimeDomain, controls: ControlSet, policies: Sequence[Policy],
                  samples, eps: float, cfg: SimConfig, h_hat: tuple, check: bool = True) -> SandwichResult:
    """Check V <= V^eps <= V + h(eps) at interior samples with common random numbers.

    ``h_hat`` is ``(value, ci)``, e.g. ``DiniCurve.at(eps)``.  Stopped and
    penalized costs come from the same paths; the lower bound is checked path
    by path, the upper one on the paired mean difference with the CIs of the
    difference and of ``h_hat`` combined in quadrature.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if check:
        check_regime(model, domain, controls)
    starts = [(float(s[0]), np.atleast_1d(np.asarray(s[1], float))) for s in samples]
    per_policy = []
    lower = -np.inf
    for p in policies:
        batches = _simulate_many(model, domain, p, starts, cfg, "penalized", [eps])
        rows = []
        for b in batches:
            stop, pen = b.total_cost, b.penalized_cost[:, 0]
            lower = max(lower, float(np.max(stop - pen)))
            rows.append((summarize(stop, cfg.dt, p.name), summarize(pen, cfg.dt, p.name),
                         summarize(pen - stop, cfg.dt, p.name)))
        per_policy.append(rows)
    stopped, penal, dci = [], [], []
    for i in range(len(starts)):
        s_best = min((pol[i][0] for pol in per_policy), key=lambda e: (e.mean, e.policy))
        p_best = min((pol[i][1] for pol in per_policy), key=lambda e: (e.mean, e.policy))
        stopped.append(s_best.mean)
        penal.append(p_best.mean)
        if s_best.policy == p_best.policy:
            pair = next(pol[i][2] for pol in per_policy if pol[i][2].policy == s_best.policy)
            dci.append(pair.ci_half_width)
        else:
            dci.append(math.hypot(s_best.ci_half_width, p_best.ci_half_width))
    inputs = {"samples": [(t, x.tolist()) for t, x in starts], "eps": eps, "dt": cfg.dt,
              "n_paths": cfg.n_paths, "seed": cfg.seed}
    return SandwichResult(float(eps), float(h_hat[0]), float(h_hat[1]), stopped, penal, dci, lower, inputs)


# -- jump probe -------------------------------------------------------------------


@dataclass
class JumpProbe:
    times: list
    offsets: list
    diff: np.ndarray
    ci: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    inputs: dict

    @property
    def gap(self) -> np.ndarray:
        """Size of the two-sided difference, ``|V(x + d) - V(x - d)|``."""
        return np.abs(self.diff)

    def nonincreasing(self, ti: int = 0) -> bool:
        """Gap nonincreasing as the offset shrinks, up to the CIs of consecutive estimates."""
        g, c = self.gap[ti], self.ci[ti]
        return bool(all(g[j + 1] <= g[j] + c[j] + c[j + 1] for j in range(len(g) - 1)))

    def record(self, threshold: Optional[float] = None) -> dict:
        stat = self.gap.tolist()
        passed = True if threshold is None else bool(np.all(self.gap <= threshold))
        return _record("jump_probe", self.inputs, stat, threshold, passed, ci=self.ci.tolist())

    def csv_rows(self) -> list:
        return [("jump_probe", f"t={t}", d, float(self.gap[i, j]), float(self.ci[i, j]))
                for i, t in enumerate(self.times) for j, d in enumerate(self.offsets)]


def jump_probe(model: SdeModel, domain: SpaceTimeDomain, policies: Sequence[Policy], curve: Callable,
               times: Sequence[float], offsets: Sequence[float], cfg: SimConfig, axis: int = 0) -> JumpProbe:
    """Estimate V(t, c(t) + d e) - V(t, c(t) - d e) across a curve ``c``.

    Offsets move along spatial ``axis`` only.  Every start shares the same
    noise per path index, and all starts are simulated in one pass when their
    times sit on a common grid.  Deterministic models integrate a single path.
    """
    offsets = sorted((float(d) for d in offsets), reverse=True)
    if not offsets or offsets[-1] <= 0:
        raise ValueError("offsets must be positive")
    times = [float(t) for t in times]
    space = domain.space
    e = np.zeros(domain.dim)
    e[axis] = 1.0
    starts = []
    for t in times:
        c = np.atleast_1d(np.asarray(curve(t), float))
        if float(space.rho(c[None, :])[0]) >= 0:
            raise ValueError(f"curve point {c.tolist()} at t={t} is not inside the domain")
        for d in offsets:
            starts += [(t, c + d * e), (t, c - d * e)]
    per_policy = []
    for p in policies:
        batches = _simulate_many(model, domain, p, starts, cfg, "stopped")
        per_policy.append([b.total_cost for b in batches])
    nt, nd = len(times), len(offsets)
    diff = np.empty((nt, nd))
    ci = np.empty((nt, nd))
    up = np.empty((nt, nd))
    lo = np.empty((nt, nd))
    for i in range(nt):
        for j in range(nd):
            k = 2 * (i * nd + j)
            ests_up = [summarize(pp[k], cfg.dt, p.name) for pp, p in zip(per_policy, policies)]
            ests_lo = [summarize(pp[k + 1], cfg.dt, p.name) for pp, p in zip(per_policy, policies)]
            iu = min(range(len(policies)), key=lambda q: (ests_up[q].mean, policies[q].name))
            il = min(range(len(policies)), key=lambda q: (ests_lo[q].mean, policies[q].name))
            up[i, j], lo[i, j] = ests_up[iu].mean, ests_lo[il].mean
            diff[i, j] = up[i, j] - lo[i, j]
            if iu == il:
                ci[i, j] = summarize(per_policy[iu][k] - per_policy[iu][k + 1], cfg.dt, "").ci_half_width
            else:
                ci[i, j] = math.hypot(ests_up[iu].ci_half_width, ests_lo[il].ci_half_width)
    inputs = {"times": times, "offsets": offsets, "axis": axis, "dt": cfg.dt, "n_paths": cfg.n_paths,
              "seed": cfg.seed}
    return JumpProbe(times, offsets, diff, ci, up, lo, inputs)


def parabola_curve(t: float) -> float:
    """The tangency curve x = -t^2 + 2t of the built-in parabola scenarios."""
    return -t * t + 2.0 * t


# -- session output -----------------------------------------------------------------


def append_session_csv(path, results) -> None:
    """Append one row per result record, plus curve points where available.

    Columns: ``kind, test, key, value, ci, pass, json``.
    """
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["kind", "test", "key", "value", "ci", "pass", "json"])
        for r in results:
            rec = r.record()
            w.writerow(["record", rec["test"], "", "", "", int(rec["pass"]),
                        json.dumps(rec, sort_keys=True, default=_jsonable)])
            if hasattr(r, "csv_rows"):
                for row in r.csv_rows():
                    test, *rest = row
                    if len(rest) == 3:
                        key, value, c = rest
                    else:
                        key = f"{rest[0]}|delta={rest[1]}"
                        value, c = rest[2], rest[3]
                    w.writerow(["curve", test, key, repr(float(value)), repr(float(c)), "", ""])


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
