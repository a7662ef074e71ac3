"""Command-line runner: ``exitcontrol <subcommand> [--config FILE] [flags]``.

Every run writes ``<subcommand>_report.json`` (deterministic given the
config and seed), CSV data where relevant, a ``<subcommand>_config.yaml``
holding the effective config, and a ``<subcommand>_manifest.json`` with
timing and output paths.  The exit code is 0 iff all checks of the run
pass, 1 if some check fails and 2 on configuration or CFL errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from typing import Optional

import numpy as np

from . import __version__
from . import config as C
from .diagnostics import (
    append_session_csv,
    dini_curve,
    dwell_time_test,
    immediate_exit_test,
    jump_probe,
    martingale_hitting_test,
    parabola_curve,
    sandwich_test,
)
from .geometry import SpaceTimeDomain
from .hjb import CflError, FdScheme, solve_hjb
from .model import constant_policies, parabola_exit_time
from .regularity import scan_boundary
from .simulate import LATERAL, SimConfig, simulate_penalized, simulate_stopped, summary_csv, write_path_dump
from .value import GridSpec, build_value_field, estimate_penalized_values, estimate_value

SCHEMA_VERSION = 1
OUT_ENV = "EXITCONTROL_OUT"
DEFAULT_OUT = "exitcontrol_out"
DEFAULT_EPS = [0.2, 0.1, 0.05, 0.025]
DIAGNOSTICS = ("immediate_exit", "martingale_hitting", "dwell_time", "dini_curve", "sandwich", "jump_probe")


class RunError(RuntimeError):
    pass


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


class Run:
    """Collects outputs and checks for one subcommand invocation."""

    def __init__(self, sub: str, cfg: dict, out_dir: str):
        self.sub, self.cfg, self.out_dir = sub, cfg, out_dir
        self.outputs: list[str] = []
        self.checks: list[dict] = []
        self.results: dict = {}
        os.makedirs(out_dir, exist_ok=True)

    def write(self, name: str, text: str) -> str:
        path = os.path.join(self.out_dir, name)
        with open(path, "w", newline="") as fh:
            fh.write(text)
        self.outputs.append(path)
        return path

    def check(self, name: str, passed: bool, statistic, target, **extra) -> None:
        self.checks.append({"name": name, "pass": bool(passed), "statistic": statistic, "target": target, **extra})

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.checks)

    def finish(self, started: float) -> int:
        scenario = self.cfg.get("scenario") or self.cfg.get("name", "custom")
        report = {"schema_version": SCHEMA_VERSION, "subcommand": self.sub, "scenario": scenario,
                  "version": __version__, "config": C.effective(self.cfg), "results": self.results,
                  "checks": self.checks, "pass": self.passed}
        self.write(f"{self.sub}_config.yaml", C.dump(self.cfg))
        self.write(f"{self.sub}_report.json", _dumps(report))
        manifest = {"schema_version": SCHEMA_VERSION, "scenario": scenario, "subcommand": self.sub,
                    "parameters": C.effective(self.cfg), "seed": C.get(self.cfg, "sim.seed", 0),
                    "version": __version__, "outputs": sorted(self.outputs),
                    "wall_clock_s": round(time.perf_counter() - started, 3),
                    "checks": {c["name"]: c["pass"] for c in self.checks}, "pass": self.passed}
        path = os.path.join(self.out_dir, f"{self.sub}_manifest.json")
        with open(path, "w") as fh:
            fh.write(_dumps(manifest))
        for c in self.checks:
            print(f"{'PASS' if c['pass'] else 'FAIL'}  {c['name']}: {c['statistic']} (target {c['target']})")
        return 0 if self.passed else 1


# -- helpers -----------------------------------------------------------------------


def _start(raw, dim: int, field: str):
    if raw is None:
        raise C.ConfigError("missing start point [t, x0, ...]", field)
    flat = np.asarray(raw, float).ravel()
    if flat.size != dim + 1:
        raise C.ConfigError(f"start must have 1 + {dim} numbers", field)
    return float(flat[0]), flat[1:]


def _eps_list(cfg: dict) -> list:
    eps = cfg.get("eps", DEFAULT_EPS)
    return [float(e) for e in (eps if isinstance(eps, (list, tuple)) else [eps])]


def _boundary_samples(cfg: dict, domain: SpaceTimeDomain, key: str) -> list:
    raw = C.get(cfg, key)
    if raw is not None:
        return [_start(r, domain.dim, key) for r in raw]
    T = domain.horizon
    times = [T * f for f in (0.125, 0.375, 0.625, 0.875)]
    pts = domain.space.sample_boundary(int(C.get(cfg, "dini.n_points", 2 if domain.dim == 1 else 16)))
    return [(t, p) for t in times for p in pts]


# -- subcommands -------------------------------------------------------------------------


def cmd_simulate(run: Run, sc, sim: SimConfig) -> None:
    block = run.cfg.get("simulate", {})
    t0, x0 = _start(block.get("start"), sc.domain.dim, "simulate.start")
    policy = constant_policies(sc.controls)[int(block.get("control", 0))]
    mode = block.get("mode", "stopped")
    if mode == "stopped":
        batch = simulate_stopped(sc.model, sc.domain, policy, (t0, x0), sim)
    elif mode == "penalized":
        batch = simulate_penalized(sc.model, sc.domain, policy, (t0, x0), sim, _eps_list(run.cfg))
    else:
        raise C.ConfigError("mode must be stopped or penalized", "simulate.mode")
    run.write("simulate_paths.csv", summary_csv(batch))
    if block.get("dump"):
        path = os.path.join(run.out_dir, "simulate_paths.bin")
        write_path_dump(batch, path)
        run.outputs.append(path)
    res = {"mode": mode, "start": [t0, x0.tolist()], "n_paths": batch.n_paths,
           "mean_exit_time": float(np.mean(batch.exit_time)),
           "lateral_fraction": float(np.mean(batch.exit_face == LATERAL)),
           "mean_cost": float(np.mean(batch.total_cost))}
    if mode == "penalized":
        res["penalized_mean"] = {str(e): float(np.mean(batch.penalized_cost[:, j])) for j, e in enumerate(batch.eps)}
    run.results = res
    run.check("finite_costs", bool(np.all(np.isfinite(batch.total_cost))), "all finite", "all finite")


def cmd_value(run: Run, sc, sim: SimConfig) -> None:
    block = run.cfg.get("value", {})
    mode = block.get("mode", "stopped")
    if mode not in ("stopped", "penalized"):
        raise C.ConfigError("mode must be stopped or penalized", "value.mode")
    policies = constant_policies(sc.controls)
    eps = _eps_list(run.cfg)
    if "points" in block:
        rows = []
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["t", *(f"x{i}" for i in range(sc.domain.dim)), "eps", "mean", "ci", "policy"])
        for raw in block["points"]:
            t, x = _start(raw, sc.domain.dim, "value.points")
            if mode == "stopped":
                ests = {None: estimate_value(sc.model, sc.domain, policies, (t, x), sim)}
            else:
                ests = estimate_penalized_values(sc.model, sc.domain, policies, (t, x), sim, eps)
            for e, est in ests.items():
                w.writerow([repr(t), *map(repr, x.tolist()), "" if e is None else repr(e), repr(est.mean),
                            repr(float(est.ci_half_width)), est.policy])
                rows.append({"t": t, "x": x.tolist(), "eps": e, "mean": est.mean, "ci": est.ci_half_width})
        run.write("value_points.csv", buf.getvalue())
        run.results = {"mode": mode, "points": rows}
        run.check("finite_values", all(math.isfinite(r["mean"]) for r in rows), "all finite", "all finite")
        return
    grid = block.get("grid", {})
    lo, hi = (np.atleast_1d(np.asarray(v, float)) for v in sc.domain.space.bounds)
    nt = int(grid.get("nt", 5))
    nx = grid.get("nx", 5)
    nx = [int(nx)] * sc.domain.dim if np.isscalar(nx) else [int(v) for v in nx]
    spec = GridSpec.uniform(grid.get("t_range", (0.0, sc.domain.horizon)), nt,
                            grid.get("x_ranges", list(zip(lo.tolist(), hi.tolist()))), nx)
    field_ = build_value_field(sc.model, sc.domain, policies, spec, sim, mode,
                               eps[0] if mode == "penalized" else None)
    run.write("value_field.csv", field_.to_csv())
    path = os.path.join(run.out_dir, "value_field.bin")
    with open(path, "wb") as fh:
        fh.write(field_.to_bytes())
    run.outputs.append(path)
    run.results = {"mode": mode, "shape": list(field_.values.shape), "min": float(field_.values.min()),
                   "max": float(field_.values.max())}
    run.check("finite_values", bool(np.all(np.isfinite(field_.values))), "all finite", "all finite")


def _policy_csv(policy, controls) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    dim = len(policy.axes)
    w.writerow(["t", *(f"x{i}" for i in range(dim)), "control_index", *(f"a{i}" for i in range(controls.dim))])
    mesh = np.meshgrid(*policy.axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    for it, t in enumerate(policy.times):
        idx = policy.table[it].ravel()
        for node, k in zip(nodes, idx):
            w.writerow([repr(float(t)), *map(repr, node.tolist()), int(k), *map(repr, controls.points[k].tolist())])
    return buf.getvalue()


def cmd_hjb(run: Run, sc, sim: SimConfig) -> None:
    block = run.cfg.get("hjb", {})
    lo, hi = (np.atleast_1d(np.asarray(v, float)) for v in sc.domain.space.bounds)
    dx = block.get("dx", ((hi - lo) / 100).tolist())
    scheme = FdScheme(dx=dx, dt=block.get("dt"), cfl_safety=float(block.get("cfl_safety", 0.9)),
                      cross=block.get("cross", "none"), n_store=int(block.get("n_store", 201)))
    field_, policy = solve_hjb(sc.model, sc.domain, sc.controls, scheme)
    print(f"hjb: {field_.meta['n_steps']} steps, dt={field_.meta['dt']:.4e}, "
          f"max CFL number {field_.meta['cfl_number']:.4f}", file=sys.stderr)
    run.write("hjb_field.csv", field_.to_csv())
    path = os.path.join(run.out_dir, "hjb_field.bin")
    with open(path, "wb") as fh:
        fh.write(field_.to_bytes())
    run.outputs.append(path)
    run.write("hjb_policy.csv", _policy_csv(policy, sc.controls))
    run.results = {"meta": field_.meta, "shape": list(field_.values.shape)}
    run.check("cfl", field_.meta["cfl_number"] <= 1.0 + 1e-12, field_.meta["cfl_number"], "<= 1")


def cmd_regularity(run: Run, sc, sim: SimConfig) -> None:
    block = run.cfg.get("regularity", {})
    T = sc.domain.horizon
    times = block.get("times", np.linspace(T / 20, T - T / 20, 19).round(12).tolist())
    points = block.get("points")
    rep = scan_boundary(sc.model, sc.domain, sc.controls, times, points=points,
                        n_points=int(block.get("n_points", 64)), margin=float(block.get("margin", 1e-8)))
    run.write("regularity_report.json", rep.to_json() + "\n")
    run.write("regularity_table.txt", rep.table() + "\n")
    print(rep.table())
    run.results = {"verdict": rep.verdict(), "n_samples": rep.n_samples,
                   "drift_condition_all": rep.drift_condition_all, "cost_positivity_holds": rep.cost_positivity_holds}
    run.check("boundary_exit_condition", rep.exit_condition_all, rep.verdict(), "holds at all sampled points")


def _diag_dt(run: Run, block: dict, default: float) -> float:
    if "dt" in block:
        return float(block["dt"])
    return float(run.cfg.get("_dt_flag") or default)


def cmd_diagnose(run: Run, sc, sim: SimConfig, test: str) -> None:
    block = C.get(run.cfg, f"diagnose.{test}", {}) or {}
    policies = constant_policies(sc.controls) if sc is not None else []
    if test == "immediate_exit":
        t, y = _start(block.get("start"), sc.domain.dim, f"diagnose.{test}.start")
        cfg = sim.replace(dt=_diag_dt(run, block, 1e-6))
        res = immediate_exit_test(sc.model, sc.domain, sc.controls, int(block.get("control", 0)), t, y,
                                  float(block.get("delta", 0.01)), cfg)
    elif test == "martingale_hitting":
        expr = C.Expr(block.get("sigma_hat", "1 + sin(t)**2"), f"diagnose.{test}.sigma_hat")
        cfg = sim.replace(dt=_diag_dt(run, block, 1e-6))
        res = martingale_hitting_test(float(block.get("delta", 0.01)), cfg,
                                      lambda s: np.broadcast_to(np.asarray(expr({"t": s}), float), s.shape),
                                      t=float(block.get("t", 0.0)))
    elif test == "dwell_time":
        t, x = _start(block.get("start"), sc.domain.dim, f"diagnose.{test}.start")
        res = dwell_time_test(sc.model, sc.domain, policies, t, x, block.get("h", [0.05, 0.1, 0.2]), sim,
                              int(block.get("min_steps", 1000)), float(block.get("lower_bound", 0.0)))
    elif test == "dini_curve":
        samples = _boundary_samples(run.cfg, sc.domain, f"diagnose.{test}.samples")
        res = dini_curve(sc.model, sc.domain, sc.controls, policies, samples, _eps_list(run.cfg), sim)
    elif test == "sandwich":
        eps = float(block.get("eps", 0.05))
        samples = _boundary_samples(run.cfg, sc.domain, f"diagnose.{test}.boundary")
        dc = dini_curve(sc.model, sc.domain, sc.controls, policies, samples, [eps], sim)
        inner = [_start(r, sc.domain.dim, f"diagnose.{test}.samples") for r in block.get("samples", [])]
        if not inner:
            raise C.ConfigError("needs interior samples", f"diagnose.{test}.samples")
        res = sandwich_test(sc.model, sc.domain, sc.controls, policies, inner, eps, sim, dc.at(eps))
    elif test == "jump_probe":
        curve_expr = block.get("curve")
        if curve_expr is None:
            curve = parabola_curve
        else:
            e = C.Expr(curve_expr, f"diagnose.{test}.curve")
            curve = lambda t: float(np.asarray(e({"t": t})))  # noqa: E731
        res = jump_probe(sc.model, sc.domain, policies, curve, block.get("times", [0.5]),
                         block.get("offsets", [0.04, 0.02, 0.01]), sim)
    else:
        raise C.ConfigError(f"unknown test {test!r}; choose from {', '.join(DIAGNOSTICS)}", "diagnose")
    rec = res.record()
    run.results = rec
    run.write(f"diagnose_{test}.json", _dumps(rec))
    session = os.path.join(run.out_dir, "session.csv")
    append_session_csv(session, [res])
    if session not in run.outputs:
        run.outputs.append(session)
    run.check(test, rec["pass"], rec["statistic"], rec["threshold"])


def cmd_dini(run: Run, sc, sim: SimConfig) -> None:
    samples = _boundary_samples(run.cfg, sc.domain, "dini.samples")
    curve = dini_curve(sc.model, sc.domain, sc.controls, constant_policies(sc.controls), samples,
                       _eps_list(run.cfg), sim)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["eps", "h_hat", "ci", "argmax_t", "argmax_x"])
    for e, h, c, k in zip(curve.eps, curve.h_hat, curve.ci, curve.argmax):
        t, x = curve.samples[k]
        w.writerow([repr(e), repr(h), repr(c), repr(t), " ".join(map(repr, x))])
    run.write("dini.csv", buf.getvalue())
    run.results = curve.record()
    run.check("dini_monotone", curve.monotone, curve.h_hat, "nonincreasing in eps")


def cmd_example41(run: Run, sc, sim: SimConfig, quick: bool) -> None:
    """Reproduce the parabola example: closed-form exits, the jump, boundary formulas and MC checks."""
    from .model import builtin_scenario

    det, dom, A = builtin_scenario("example41_deterministic")
    sto, _, _ = builtin_scenario("example41_stochastic")
    pols = constant_policies(A)
    block = run.cfg.get("example41", {})
    delta = float(block.get("delta", 1e-3))
    times = [0.1, 0.3, 0.5, 0.7, 0.9]
    jp = jump_probe(det, dom, pols, parabola_curve, times, [delta], SimConfig(dt=1e-4, n_paths=1))
    gaps = jp.gap[:, 0]
    exact = [(2 - t) - (1 - t - math.sqrt(delta)) for t in times]
    run.results["deterministic_jump"] = {"t": times, "delta": delta, "gap": gaps.tolist(), "closed_form": exact}
    run.check("jump_matches_closed_form", bool(np.all(np.abs(gaps - exact) <= 2e-3)), gaps.tolist(),
              "1 + sqrt(delta) within 2e-3")
    run.check("jump_equals_one", bool(np.all(np.abs(gaps - 1.0) <= 0.01)), gaps.tolist(), "1.000 +- 0.01")

    cfg4 = SimConfig(dt=1e-4, n_paths=1)
    tau_a = float(simulate_stopped(det, dom, pols[0], (0.0, [0.01]), cfg4).exit_time[0])
    tau_b = float(simulate_stopped(det, dom, pols[0], (0.0, [-0.01]), cfg4).exit_time[0])
    run.results["exit_times"] = {"from_0.01": tau_a, "from_-0.01": tau_b,
                                 "closed_form": [parabola_exit_time(0.0, 0.01), parabola_exit_time(0.0, -0.01)]}
    run.check("exit_time_upper", abs(tau_a - 0.9) <= 0.002, tau_a, "0.900 +- 0.002")
    run.check("exit_time_terminal", tau_b == 2.0, tau_b, "2.0 exactly")

    ts = np.linspace(0.05, 1.95, 39).round(12).tolist()
    rep = scan_boundary(sto, dom, A, ts, points=[[-1.0], [1.0]])
    err = 0.0
    for r in rep.reports:
        t, y = r.t, r.y[0]
        want_l = -2 * (t - 1) if y > 0 else 2 * (t - 1)
        want_s = max(2 * t - 1, 0.0) if y > 0 else max(2 * t + 1, 0.0)
        err = max(err, abs(r.drift_term[0] - want_l), abs(r.sigma_term[0] - want_s))
    fs_fail = all(not r.drift_condition_holds for r in rep.reports if r.y[0] > 0 and r.t >= 1)
    run.results["boundary_formulas"] = {"max_error": err, "verdict": rep.verdict()}
    run.check("boundary_formulas", err <= 1e-10, err, "<= 1e-10")
    run.check("exit_condition_stochastic", rep.exit_condition_all, rep.verdict(), "all samples")
    run.check("drift_condition_fails_y1_t_ge_1", fs_fail, fs_fail, True)
    rep_det = scan_boundary(det, dom, A, [0.25, 0.5, 0.75], points=[[-1.0]])
    run.check("exit_condition_fails_deterministic", not any(r.exit_condition_holds for r in rep_det.reports),
              rep_det.verdict(), "fails at y=-1, t<1")
    fail = immediate_exit_test(det, dom, A, 0, 0.5, [-1.0], 0.01, SimConfig(dt=1e-6, n_paths=16))
    run.check("immediate_exit_failure_case", fail.fraction == 0.0, fail.fraction, 0.0)
    if quick:
        return

    n = sim.n_paths
    jp_s = jump_probe(sto, dom, pols, parabola_curve, [0.5], [0.04, 0.02, 0.01], SimConfig(dt=1e-3, n_paths=n,
                      seed=sim.seed, workers=sim.workers))
    g, c = jp_s.gap[0], jp_s.ci[0]
    run.results["stochastic_jump"] = {"delta": jp_s.offsets, "gap": g.tolist(), "ci": c.tolist()}
    run.check("stochastic_jump_ci_excludes_one", bool(np.all(g + c < 1.0)), g.tolist(), "CI excludes 1")
    run.check("stochastic_jump_nonincreasing", jp_s.nonincreasing(0), g.tolist(), "nonincreasing within CI")
    run.check("stochastic_jump_small", float(g[-1]) <= 0.3, float(g[-1]), "<= 0.3")

    cfg_mc = SimConfig(dt=1e-3, n_paths=n, seed=sim.seed, workers=sim.workers)
    samples = [(t, np.array([y])) for t in (0.25, 0.75, 1.25, 1.75) for y in (-1.0, 1.0)]
    dc = dini_curve(sto, dom, A, pols, samples, DEFAULT_EPS, cfg_mc)
    run.results["dini"] = {"eps": dc.eps, "h_hat": dc.h_hat, "ci": dc.ci}
    run.check("dini_monotone", dc.monotone, dc.h_hat, "nonincreasing")
    run.check("dini_halving", dc.h_hat[-1] < dc.h_hat[0] / 2, dc.h_hat[-1] / dc.h_hat[0], "< 0.5")
    sw = sandwich_test(sto, dom, A, pols, [(0.5, [0.0]), (1.0, [0.5]), (0.25, [-0.5])], 0.05, cfg_mc, dc.at(0.05))
    run.results["sandwich"] = sw.record()
    run.check("sandwich_lower_pathwise", sw.lower_pathwise <= 0.0, sw.lower_pathwise, "<= 0")
    run.check("sandwich_upper", sw.violation <= 0.0, sw.violation, "<= 0")

    cfg6 = SimConfig(dt=1e-6, n_paths=min(n, 10_000), seed=sim.seed, workers=sim.workers)
    drift = immediate_exit_test(sto, dom, A, 0, 0.25, [1.0], 0.01, cfg6)
    diff = immediate_exit_test(sto, dom, A, 0, 1.5, [1.0], 0.01, cfg6)
    mart = martingale_hitting_test(0.01, cfg6, lambda s: np.ones_like(s))
    run.check("immediate_exit_drift", drift.fraction == 1.0, drift.fraction, 1.0)
    run.check("immediate_exit_diffusion", diff.fraction >= 0.98, diff.fraction, ">= 0.98")
    run.check("martingale_hitting", mart.fraction >= 0.98, mart.fraction, ">= 0.98")


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML scenario/config file")
    common.add_argument("--scenario", help="built-in scenario name (same as --set scenario=NAME)")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    common.add_argument("--workers", type=int, help="worker threads (default: all cores)")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--dt", type=float, help="time step")
    common.add_argument("--paths", type=int, help="number of Monte Carlo paths")
    common.add_argument("--eps", help="comma-separated penalization parameters")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. sim.dt=1e-4 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="exitcontrol", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"exitcontrol {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate paths from one start")
    sub.add_parser("value", parents=[common], help="value estimates at points or on a grid")
    sub.add_parser("hjb", parents=[common], help="finite-difference solve and policy export")
    sub.add_parser("regularity", parents=[common], help="boundary condition scan")
    d = sub.add_parser("diagnose", parents=[common], help="run one diagnostic test")
    d.add_argument("test", choices=DIAGNOSTICS)
    e = sub.add_parser("example41", parents=[common], help="reproduce the parabola example checks")
    e.add_argument("--quick", action="store_true", help="closed-form checks only (no Monte Carlo)")
    sub.add_parser("dini", parents=[common], help="penalized boundary values versus eps")
    return p


def _load_config(args) -> dict:
    cfg = C.load(args.config) if args.config else {"_lines": {}}
    if args.command == "example41" and "scenario" not in cfg and "model" not in cfg:
        cfg["scenario"] = "example41_deterministic"
    if args.scenario:
        cfg["scenario"] = args.scenario
    for item in args.set:
        C.apply_override(cfg, item)
    flags = {"sim.seed": args.seed, "sim.workers": args.workers, "sim.dt": args.dt, "sim.n_paths": args.paths}
    for key, val in flags.items():
        if val is not None:
            C.apply_override(cfg, f"{key}={val}")
    if args.eps:
        cfg["eps"] = [float(v) for v in args.eps.split(",") if v.strip()]
    cfg["_dt_flag"] = args.dt
    return cfg


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        cfg = _load_config(args)
        # the martingale test simulates its own process and needs no scenario
        standalone = args.command == "diagnose" and args.test == "martingale_hitting"
        sc = None if standalone and "scenario" not in cfg and "model" not in cfg else C.build_scenario(cfg)
        sim = C.sim_config(cfg)
    except (C.ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    run = Run(args.command, cfg, out_dir)
    try:
        if args.command == "simulate":
            cmd_simulate(run, sc, sim)
        elif args.command == "value":
            cmd_value(run, sc, sim)
        elif args.command == "hjb":
            cmd_hjb(run, sc, sim)
        elif args.command == "regularity":
            cmd_regularity(run, sc, sim)
        elif args.command == "diagnose":
            cmd_diagnose(run, sc, sim, args.test)
        elif args.command == "example41":
            cmd_example41(run, sc, sim, args.quick)
        elif args.command == "dini":
            cmd_dini(run, sc, sim)
    except CflError as exc:
        print(f"CFL error: {exc}", file=sys.stderr)
        return 2
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return run.finish(started)


if __name__ == "__main__":
    sys.exit(main())
