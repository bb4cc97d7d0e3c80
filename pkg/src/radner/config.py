"""Experiment configuration: a flat ``key = value`` text format.

Grammar (one entry per line)::

    line    := blank | comment | key "=" value [comment]
    comment := "#" ...
    key     := [A-Za-z_][A-Za-z0-9_]*
    value   := Python literal (int, float, string, bool, None, list, tuple)
             | arithmetic on numbers with + - * / ** (e.g. ``1/3``)
             | bare word (read as a string, e.g. ``economy = gaussian``);
               path-valued keys also take bare paths

Lists may not span lines.  Every key is optional except ``economy``; unknown
keys, duplicates and ill-typed values are rejected with the line number and
key in the message.
"""
from __future__ import annotations

import ast
import math
import re
from dataclasses import dataclass, fields, replace

import numpy as np

ECONOMIES = ("gaussian", "put_option", "custom_tabulated")

_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_WORD = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-/]*$")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        where = f"line {line}: " if line is not None else ""
        tag = f"'{key}': " if key else ""
        super().__init__(f"{where}{tag}{message}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment parameters; see the README for every key."""

    economy: str
    # gaussian economy (scaled payoff rows)
    b0: tuple = (1.0, 0.0)
    b_agents: tuple = ((0.5, 0.3), (-0.2, 0.1))
    deltas: tuple = (1.0 / 3.0, 0.5)
    x0: tuple | None = None
    # put-option economy
    N: tuple = (1.0, 2.0)
    delta1_sweep: tuple = (1.0 / 3.0, 0.5)
    sigma_w: float = 0.2 / math.sqrt(2.0)
    eps_payoff: float = 0.0
    sweep_points: int = 161
    sweep_half_width: float | None = None
    # custom tabulated economy
    table_file: str | None = None
    sigma: tuple | None = None
    drift: tuple | None = None
    # grid
    box: tuple | None = None
    box_m: float = 5.0
    n_x: int = 161
    n_t: int = 200
    refine_n_x: tuple = (41, 81, 161)
    refine_min_order: float = 1.8
    # regularization
    reg_n: float = 50.0
    ladder: tuple = (25.0, 50.0, 100.0)
    ladder_tol: float = 5e-3
    bound_margin: float = 0.1
    # validator
    n_paths: int = 10_000
    n_steps: int = 400
    seed: int = 20240101
    eps_nodal: float = 1e-8
    nodal_eps: float = 1e-6
    nodal_max_fraction: float = 1e-3
    structural_samples: int = 100_000
    grad_bound_m: float | None = None
    ellipticity_lambda: float = 1e-6
    quadrature_nodes: int = 200
    oracle_tol: float = 1e-2
    clearing_tol: float = 1e-10
    residual_tol: float = 1e-2
    residual_zmax: float = 5.0
    residual_bias_tol: float = 1e-4
    martingale_zmax: float = 4.0
    # output and toggles
    out: str = "out"
    check_structural: bool = True
    check_oracle: bool = True
    check_refine: bool = True
    check_ladder: bool = True
    check_mc: bool = True
    check_nodal: bool = True
    corrupt_shift: float = 0.0

    @property
    def alphas(self) -> np.ndarray:
        d = np.asarray(self.deltas, dtype=float)
        return d / d.sum()


_NAMES = {f.name for f in fields(ExperimentConfig)}
_INTS = {"n_x", "n_t", "n_paths", "n_steps", "seed", "sweep_points", "structural_samples", "quadrature_nodes"}
_BOOLS = {n for n in _NAMES if n.startswith("check_")}
_STRINGS = {"economy", "table_file", "out"}
_OPTIONAL = {"x0", "sweep_half_width", "table_file", "sigma", "drift", "box", "grad_bound_m"}
_POSITIVE = {"sigma_w", "box_m", "reg_n", "ladder_tol", "n_paths", "n_steps", "n_t", "eps_nodal",
             "nodal_eps", "structural_samples", "ellipticity_lambda", "quadrature_nodes", "oracle_tol",
             "clearing_tol", "residual_tol", "residual_zmax", "residual_bias_tol", "martingale_zmax",
             "sweep_points",
             "refine_min_order", "grad_bound_m", "sweep_half_width", "bound_margin"}


_BINOPS = {ast.Add: lambda a, b: a + b, ast.Sub: lambda a, b: a - b, ast.Mult: lambda a, b: a * b,
           ast.Div: lambda a, b: a / b, ast.Pow: lambda a, b: a**b}


def _eval_node(node):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float, str, bool, type(None))):
        return node.value
    if isinstance(node, (ast.List, ast.Tuple)):
        return [_eval_node(e) for e in node.elts]
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _eval_node(node.operand)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError("sign applied to a non-number")
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        a, b = _eval_node(node.left), _eval_node(node.right)
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in (a, b)):
            raise ValueError("arithmetic on a non-number")
        return _BINOPS[type(node.op)](a, b)
    raise ValueError("unsupported expression")


def _literal(raw: str, key: str, line: int):
    try:
        return _eval_node(ast.parse(raw, mode="eval").body)
    except ZeroDivisionError:
        raise ConfigError("division by zero", key, line) from None
    except (ValueError, SyntaxError, TypeError, OverflowError):
        if _WORD.match(raw) or (key in _STRINGS and raw[0] not in "'\"[("):
            return raw
        raise ConfigError(f"cannot parse value {raw!r}", key, line) from None


def _as_tuple(value):
    if isinstance(value, (list, tuple)):
        return tuple(_as_tuple(v) for v in value)
    return value


def _real(value, key, line) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"expected a finite number, got {value!r}", key, line)
    return float(value)


def _real_array(value, key, line):
    arr = value if isinstance(value, tuple) else (value,)
    out = []
    for v in arr:
        out.append(_real_array(v, key, line) if isinstance(v, tuple) else _real(v, key, line))
    return tuple(out)


def _coerce(key: str, value, line: int):
    if value is None:
        if key in _OPTIONAL:
            return None
        raise ConfigError("value may not be None", key, line)
    if key in _BOOLS:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key, line)
        return value
    if key in _STRINGS:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key, line)
        return value
    if key in _INTS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key, line)
        return value
    if isinstance(value, tuple) or key in {"b0", "b_agents", "deltas", "x0", "N", "delta1_sweep", "sigma",
                                           "drift", "box", "refine_n_x", "ladder"}:
        value = _real_array(_as_tuple(value), key, line)
        if key == "refine_n_x":
            if any(v != int(v) for v in value):
                raise ConfigError("grid sizes must be integers", key, line)
            value = tuple(int(v) for v in value)
        return value
    return _real(value, key, line)


def _validate(cfg: ExperimentConfig, lines: dict) -> None:
    def fail(key, msg):
        raise ConfigError(msg, key, lines.get(key))

    if cfg.economy not in ECONOMIES:
        fail("economy", f"unknown economy {cfg.economy!r}; expected one of {', '.join(ECONOMIES)}")
    for key in _POSITIVE:
        v = getattr(cfg, key)
        if v is not None and not v > 0:
            fail(key, f"must be positive, got {v}")
    if cfg.n_x < 3:
        fail("n_x", f"needs at least 3 nodes per axis, got {cfg.n_x}")
    if any(d <= 0 for d in cfg.deltas) or len(cfg.deltas) == 0:
        fail("deltas", "risk tolerances must be positive")
    if any(d <= 0 for d in cfg.delta1_sweep):
        fail("delta1_sweep", "risk tolerances must be positive")
    if any(n < 0 for n in cfg.N):
        fail("N", "number of puts must be non-negative")
    if len(cfg.ladder) < 2 or any(v <= 0 for v in cfg.ladder) or list(cfg.ladder) != sorted(cfg.ladder):
        fail("ladder", "needs at least two increasing positive values")
    if len(cfg.refine_n_x) < 3 or any(n < 3 for n in cfg.refine_n_x):
        fail("refine_n_x", "needs at least three grid sizes of 3 nodes or more")
    if cfg.economy == "gaussian":
        if len(cfg.b_agents) != len(cfg.deltas):
            fail("b_agents", f"{len(cfg.b_agents)} rows for {len(cfg.deltas)} agents")
        if any(len(r) != len(cfg.b0) for r in cfg.b_agents):
            fail("b_agents", "rows must match the dimension of b0")
    if cfg.economy == "put_option" and len(cfg.deltas) != 2:
        fail("deltas", "the put-option economy has exactly two agents")
    if cfg.economy == "custom_tabulated" and not cfg.table_file:
        fail("table_file", "required for the custom_tabulated economy")
    if cfg.box is not None and any(len(b) != 2 or not b[1] > b[0] for b in cfg.box):
        fail("box", "expected a list of [lo, hi] pairs with hi > lo")
    if cfg.corrupt_shift < 0:
        fail("corrupt_shift", "must be non-negative")


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate configuration text; raises :class:`ConfigError`."""
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = _strip_comment(raw).strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", None, lineno)
        key, _, rhs = body.partition("=")
        key, rhs = key.strip(), rhs.strip()
        if not _KEY.match(key):
            raise ConfigError("malformed key", key, lineno)
        if key not in _NAMES:
            raise ConfigError("unknown key", key, lineno)
        if key in values:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", key, lineno)
        if not rhs:
            raise ConfigError("missing value", key, lineno)
        lit = _literal(rhs, key, lineno)
        if isinstance(lit, str) and lit.lower() in ("true", "false") and key in _BOOLS:
            lit = lit.lower() == "true"
        if isinstance(lit, str) and lit.lower() == "none":
            lit = None
        values[key] = _coerce(key, lit, lineno)
        lines[key] = lineno
    if "economy" not in values:
        raise ConfigError("required key is missing", "economy", None)
    values["economy"] = values["economy"].replace("-", "_")
    for key in ("N", "delta1_sweep"):
        if key in values and not isinstance(values[key], tuple):
            values[key] = (values[key],)
    cfg = ExperimentConfig(**values)
    _validate(cfg, lines)
    return cfg


def _strip_comment(line: str) -> str:
    """Drop a trailing ``#`` comment that is not inside a quoted string."""
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    """Copy with non-None overrides (used by CLI flags)."""
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
