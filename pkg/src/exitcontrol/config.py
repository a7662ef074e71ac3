"""YAML scenario configs, ``key=value`` overrides and safe coefficient expressions.

A config either names a built-in scenario::

    scenario: example41_stochastic

or spells the model out, with expressions in ``t``, ``x0, x1, ...`` and
``a0, a1, ...``::

    model:
      dim_state: 1
      dim_noise: 1
      drift: ["-2*(t - 1)"]
      diffusion: [["pos(2*t - x0)"]]     # omit or null for no noise
      running_cost: "1"
      terminal_cost: "0"
    domain: {type: interval, lo: -1, hi: 1}
    horizon: 2.0
    controls: {type: singleton, value: 0.0}

Blocks named after subcommands (``sim``, ``value``, ``hjb`` ...) carry their
parameters.
"""

from __future__ import annotations

import ast
import copy
import operator
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
import yaml

from .geometry import SpaceTimeDomain, ball, box, custom, interval
from .model import BUILTIN_SCENARIOS, ControlSet, SdeModel, builtin_scenario
from .simulate import SimConfig


class ConfigError(ValueError):
    def __init__(self, message: str, field: str = "", line: Optional[int] = None):
        self.field, self.line = field, line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


# -- expressions -------------------------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv,
           ast.Pow: operator.pow}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log, "sqrt": np.sqrt,
    "abs": np.abs, "tanh": np.tanh, "minimum": np.minimum, "maximum": np.maximum,
    "pos": lambda v: np.maximum(v, 0.0), "neg": lambda v: np.maximum(-v, 0.0),
}
_CONSTS = {"pi": np.pi, "e": np.e}


class Expr:
    """Arithmetic expression over numpy arrays, restricted to a small whitelist."""

    def __init__(self, text, field: str = ""):
        self.text = str(text)
        self.field = field
        try:
            tree = ast.parse(self.text, mode="eval")
        except SyntaxError as exc:
            raise ConfigError(f"cannot parse expression {self.text!r}: {exc.msg}", field) from None
        self._check(tree.body)
        self._tree = tree.body

    def _check(self, node):
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return
        if isinstance(node, ast.Name):
            return
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
            return
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            self._check(node.operand)
            return
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS \
                and not node.keywords:
            for arg in node.args:
                self._check(arg)
            return
        raise ConfigError(f"unsupported syntax in {self.text!r}", self.field)

    def __call__(self, env: dict):
        return self._eval(self._tree, env)

    def _eval(self, node, env):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id in env:
                return env[node.id]
            if node.id in _CONSTS:
                return _CONSTS[node.id]
            raise ConfigError(f"unknown name {node.id!r} in {self.text!r}", self.field)
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](self._eval(node.operand, env))
        return _FUNCS[node.func.id](*(self._eval(a, env) for a in node.args))


def _env(t, x, a=None):
    env = {"t": t}
    for i in range(x.shape[1]):
        env[f"x{i}"] = x[:, i]
    if a is not None:
        for i in range(a.shape[1]):
            env[f"a{i}"] = a[:, i]
    return env


def _column(value, m):
    return np.broadcast_to(np.asarray(value, float), (m,))


def _expr_list(raw, n, field):
    if not isinstance(raw, (list, tuple)) or len(raw) != n:
        raise ConfigError(f"expected a list of {n} expressions", field)
    return [Expr(r, f"{field}[{i}]") for i, r in enumerate(raw)]


def model_from_config(spec: dict, name: str = "custom") -> SdeModel:
    n = int(spec.get("dim_state", 1))
    d = int(spec.get("dim_noise", n))
    k = int(spec.get("dim_control", 1))
    drift = _expr_list(spec.get("drift", ["0"] * n), n, "model.drift")
    diff_raw = spec.get("diffusion")
    diffusion = None
    if diff_raw is not None:
        if not isinstance(diff_raw, (list, tuple)) or len(diff_raw) != n:
            raise ConfigError(f"expected {n} rows of {d} expressions", "model.diffusion")
        diffusion = [_expr_list(row, d, f"model.diffusion[{i}]") for i, row in enumerate(diff_raw)]
    run = Expr(spec.get("running_cost", "0"), "model.running_cost")
    term = Expr(spec.get("terminal_cost", "0"), "model.terminal_cost")

    def b(t, x, a):
        env = _env(t, x, a)
        return np.stack([_column(e(env), x.shape[0]) for e in drift], axis=1)

    def s(t, x, a):
        env = _env(t, x, a)
        return np.stack([np.stack([_column(e(env), x.shape[0]) for e in row], axis=1) for row in diffusion], axis=1)

    def ell(t, x, a):
        return _column(run(_env(t, x, a)), x.shape[0]).copy()

    def g(t, x):
        return _column(term(_env(t, x)), x.shape[0]).copy()

    return SdeModel(n, d, k, b, s if diffusion is not None else None, ell, g, name=name)


def domain_from_config(spec: dict, horizon: float) -> SpaceTimeDomain:
    kind = spec.get("type", "interval")
    try:
        if kind == "interval":
            space = interval(float(spec.get("lo", -1.0)), float(spec.get("hi", 1.0)))
        elif kind == "box":
            space = box(spec["lo"], spec["hi"])
        elif kind == "ball":
            space = ball(spec["center"], float(spec["radius"]))
        elif kind == "custom":
            dim = int(spec.get("dim", 1))
            expr = Expr(spec["rho"], "domain.rho")
            lo, hi = spec["bounds"]
            space = custom(dim, lambda x: _column(expr(_env(0.0, x)), x.shape[0]).copy(), bounds=(lo, hi))
        else:
            raise ConfigError(f"unknown domain type {kind!r} (interval, box, ball, custom)", "domain.type")
    except KeyError as exc:
        raise ConfigError(f"missing key {exc.args[0]!r}", "domain") from None
    return SpaceTimeDomain(space, float(horizon))


def controls_from_config(spec: Optional[dict]) -> ControlSet:
    if spec is None:
        return ControlSet.singleton(0.0)
    kind = spec.get("type", "singleton")
    if kind == "singleton":
        return ControlSet.singleton(spec.get("value", 0.0))
    if kind == "grid":
        return ControlSet.finite_grid(spec["points"])
    if kind == "box":
        return ControlSet.box_grid(spec["lo"], spec["hi"], spec["resolution"])
    raise ConfigError(f"unknown control set type {kind!r}", "controls.type")


@dataclass
class Scenario:
    name: str
    model: SdeModel
    domain: SpaceTimeDomain
    controls: ControlSet


def build_scenario(cfg: dict) -> Scenario:
    name = cfg.get("scenario")
    if name is not None:
        if name not in BUILTIN_SCENARIOS:
            raise ConfigError(f"unknown scenario {name!r}; built-ins are {', '.join(BUILTIN_SCENARIOS)}",
                              "scenario", cfg.get("_lines", {}).get("scenario"))
        model, domain, controls = builtin_scenario(name)
        return Scenario(name, model, domain, controls)
    if "model" not in cfg:
        raise ConfigError("config needs either 'scenario' or a 'model' block")
    try:
        model = model_from_config(cfg["model"], cfg.get("name", "custom"))
        domain = domain_from_config(cfg.get("domain", {}), cfg.get("horizon", 1.0))
        controls = controls_from_config(cfg.get("controls"))
    except ConfigError as exc:
        line = cfg.get("_lines", {}).get(exc.field.split("[")[0])
        raise ConfigError(str(exc).split(": ", 1)[-1], exc.field, line) from None
    return Scenario(cfg.get("name", "custom"), model, domain, controls)


def sim_config(cfg: dict) -> SimConfig:
    sim = dict(cfg.get("sim", {}))
    allowed = set(SimConfig.__dataclass_fields__)
    bad = set(sim) - allowed
    if bad:
        raise ConfigError(f"unknown keys {sorted(bad)}", "sim")
    if "clip_box" in sim and sim["clip_box"] is not None:
        sim["clip_box"] = tuple(sim["clip_box"])
    try:
        return SimConfig(**sim)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "sim") from None


# -- loading and overrides ---------------------------------------------------------------


def _line_map(node, prefix="", out=None):
    """Dotted key -> 1-based line of each mapping entry."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[key] = k.start_mark.line + 1
            _line_map(v, key, out)
    return out


def load_text(text: str) -> dict:
    try:
        data = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark is not None else None
        raise ConfigError(str(exc.problem), line=line) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", line=1)
    data["_lines"] = _line_map(node) if node is not None else {}
    return data


def load(path) -> dict:
    with open(path) as fh:
        return load_text(fh.read())


def apply_override(cfg: dict, item: str) -> None:
    """Apply one ``dotted.key=value``; the value is read as YAML (numbers, lists ...)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        nxt = node.get(p)
        if not isinstance(nxt, dict):
            nxt = {}
            node[p] = nxt
        node = nxt
    node[parts[-1]] = value


def effective(cfg: dict) -> dict:
    """Config without bookkeeping keys, suitable for dumping and re-running."""
    return {k: copy.deepcopy(v) for k, v in cfg.items() if not k.startswith("_")}


def dump(cfg: dict) -> str:
    return yaml.safe_dump(effective(cfg), sort_keys=True)


def get(cfg: dict, dotted: str, default: Any = None) -> Any:
    node = cfg
    for p in dotted.split("."):
        if not isinstance(node, dict) or p not in node:
            return default
        node = node[p]
    return node
