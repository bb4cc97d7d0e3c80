"""Experiment drivers behind the command-line interface.

Every driver takes an :class:`~radner.config.ExperimentConfig`, writes CSV
files (RFC 4180 quoting, ``.`` decimal point, LF line ends, floats written
with ``repr`` so they round-trip) and returns the paths or a report.  Nothing
time- or host-dependent is written, so identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import closed_form as cf
from .config import ExperimentConfig
from .economy import (
    InvalidModelError,
    MarketModel,
    check_ellipticity,
    make_gaussian_economy,
    make_put_option_economy,
    make_tabulated_economy,
    scale_economy,
)
from .equilibrium import from_zmatrix, max_clearing_violation, nodal_set_fraction
from .generator import check_structural_conditions, sharp_grad_bound
from .mc_validator import (
    FieldInterpolant,
    ShiftedField,
    ValidationReport,
    bsde_residual,
    martingale_checks,
    simulate,
)
from .pde_solver import Grid, SolutionField, SolverOptions, build_grid, default_box, refine_study, solve

THREADS_ENV = "RADNER_THREADS"

PUT_COLUMNS = ("x2", "premium_incomplete", "premium_complete", "totalvol_incomplete", "totalvol_complete",
               "theta1_unscaled", "theta2_unscaled")
REPORT_COLUMNS = ("check", "value", "threshold", "status", "detail")


# ---------------------------------------------------------------------------
# CSV


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def read_csv(path) -> tuple:
    """``(header, rows)`` with numeric cells converted to ``float``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = []
        for row in reader:
            out = []
            for c in row:
                try:
                    out.append(float(c))
                except ValueError:
                    out.append(c)
            rows.append(out)
    return header, rows


# ---------------------------------------------------------------------------
# model and grid assembly


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidModelError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def solver_options(cfg: ExperimentConfig, keep_slices: bool = True) -> SolverOptions:
    return SolverOptions(bound_margin=cfg.bound_margin, keep_slices=keep_slices, threads=thread_count())


def load_table(path, num_agents: int):
    """Read a tabulated economy: header ``x1..xd, g0, g1..gI`` on a full tensor grid."""
    header, rows = read_csv(path)
    data = np.asarray(rows, dtype=float)
    d = sum(1 for h in header if h.startswith("x"))
    if data.ndim != 2 or data.shape[1] != d + 1 + num_agents:
        raise InvalidModelError(f"table {path} needs {d} state columns and {1 + num_agents} payoff columns")
    axes = [np.unique(data[:, j]) for j in range(d)]
    shape = tuple(a.size for a in axes)
    if int(np.prod(shape)) != data.shape[0]:
        raise InvalidModelError(f"table {path} is not a full tensor grid")
    order = np.lexsort(tuple(data[:, j] for j in reversed(range(d))))
    data = data[order]
    vals = [data[:, d + c].reshape(shape) for c in range(1 + num_agents)]
    return axes, vals[0], vals[1:]


def build_model(cfg: ExperimentConfig, N: float | None = None, delta1: float | None = None) -> MarketModel:
    deltas = list(cfg.deltas)
    if delta1 is not None:
        deltas[0] = delta1
    if cfg.economy == "gaussian":
        return make_gaussian_economy(cfg.b0, cfg.b_agents, deltas, x0=cfg.x0)
    if cfg.economy == "put_option":
        x0 = (0.0, 0.0) if cfg.x0 is None else cfg.x0
        return make_put_option_economy(cfg.N[0] if N is None else N, cfg.sigma_w, deltas, cfg.eps_payoff, x0)
    axes, g0, gi = load_table(cfg.table_file, len(deltas))
    return make_tabulated_economy(axes, g0, gi, deltas, sigma=cfg.sigma, drift=cfg.drift, x0=cfg.x0)


def grid_for(cfg: ExperimentConfig, model: MarketModel, n_x: int | None = None) -> Grid:
    box = cfg.box if cfg.box is not None else default_box(model, cfg.box_m)
    return build_grid(box, n_x or cfg.n_x, cfg.n_t, model.x0)


# ---------------------------------------------------------------------------
# put-option experiment


def tail_nodes(grid: Grid, axis: int, fraction: float = 0.9) -> tuple:
    """Outermost node coordinates of ``axis`` inside the central ``fraction`` of the box."""
    ax = grid.axes[axis]
    c = 0.5 * (ax[0] + ax[-1])
    half = 0.5 * fraction * (ax[-1] - ax[0])
    inside = ax[np.abs(ax - c) <= half * (1.0 + 1e-12)]
    return float(inside[0]), float(inside[-1])


def _zmatrix_at(sol: SolutionField, model: MarketModel, t: float, points) -> np.ndarray:
    k = sol.index_of(t)
    z = sol.gradient(k) @ model.vol_sigma(t, sol.grid.nodes)
    interp = RegularGridInterpolator(sol.grid.axes, z, method="linear")
    return interp(np.asarray(points, dtype=float))


def put_option_profile(sol: SolutionField, model: MarketModel, x2) -> dict:
    """Equilibrium columns at ``t = 0`` along ``x1 = X0[0]`` (``Z`` interpolated linearly)."""
    x2 = np.asarray(x2, dtype=float)
    pts = np.stack([np.full_like(x2, model.x0[0]), x2], axis=-1)
    econ = scale_economy(model)
    q = from_zmatrix(_zmatrix_at(sol, model, 0.0, pts), econ.alphas, econ.sum_delta)
    xi_vec = model.dividend_g0.coef @ model.vol_sigma.sigma
    # the two put positions cancel, so the aggregate endowment is the dividend alone
    bench = cf.complete_benchmark_moments(xi_vec, xi_vec, econ.sum_delta)
    theta = econ.alphas * q["thetas"]
    return {
        "x2": x2,
        "premium_incomplete": q["premium_unscaled"],
        "premium_complete": np.full_like(x2, bench["premium"]),
        "totalvol_incomplete": q["total_vol_unscaled"],
        "totalvol_complete": np.full_like(x2, bench["total_vol"]),
        "theta1_unscaled": theta[:, 0],
        "theta2_unscaled": theta[:, 1],
    }


def sweep_points(cfg: ExperimentConfig, x0_2: float = 0.0) -> np.ndarray:
    half = cfg.sweep_half_width if cfg.sweep_half_width is not None else 3.0 * cfg.sigma_w
    return np.linspace(x0_2 - half, x0_2 + half, cfg.sweep_points)


def _tag(v: float) -> str:
    return f"{v:.6g}"


def run_put_option_experiment(cfg: ExperimentConfig, out_dir=None) -> list:
    """One CSV per ``(N, delta1)`` pair; returns the written paths in run order."""
    out_dir = Path(out_dir or cfg.out)
    paths = []
    for N in cfg.N:
        for d1 in cfg.delta1_sweep:
            model = build_model(cfg, N=N, delta1=d1)
            grid = grid_for(cfg, model)
            sol = solve(model, grid, cfg.reg_n, solver_options(cfg, keep_slices=False))
            x2 = sweep_points(cfg, float(model.x0[1]))
            lo, hi = grid.lo[1], grid.hi[1]
            if x2[0] < lo or x2[-1] > hi:
                raise InvalidModelError(f"x2 sweep [{x2[0]}, {x2[-1]}] leaves the grid box [{lo}, {hi}]")
            prof = put_option_profile(sol, model, x2)
            rows = zip(*(prof[c] for c in PUT_COLUMNS))
            paths.append(write_csv(out_dir / f"put_option_N{_tag(N)}_delta1_{_tag(d1)}.csv", PUT_COLUMNS, rows))
    return paths


# ---------------------------------------------------------------------------
# single solve


def run_solve(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Values and equilibrium quantities on every grid node at ``t = 0``."""
    model = build_model(cfg)
    grid = grid_for(cfg, model)
    sol = solve(model, grid, cfg.reg_n, solver_options(cfg, keep_slices=False))
    econ = scale_economy(model)
    v = sol.slice_at(0.0).reshape(-1, sol.num_components)
    q = from_zmatrix(sol.zmatrix(0, model).reshape(-1, sol.num_components, model.dim_d),
                     econ.alphas, econ.sum_delta, cfg.eps_nodal)
    nodes = grid.nodes.reshape(-1, grid.d)
    I = econ.num_agents
    header = ([f"x{j + 1}" for j in range(grid.d)] + ["S"] + [f"R{i + 1}" for i in range(I)]
              + ["premium", "total_vol"] + [f"theta{i + 1}_unscaled" for i in range(I)] + ["fallback"])
    theta = q["thetas"] * econ.alphas
    rows = (list(nodes[p]) + list(v[p]) + [q["premium_unscaled"][p], q["total_vol_unscaled"][p]]
            + list(theta[p]) + [bool(q["zeta_zero_flag"][p])] for p in range(nodes.shape[0]))
    return write_csv(Path(out_dir or cfg.out) / "solution_t0.csv", header, rows)


# ---------------------------------------------------------------------------
# refinement


def run_refine(cfg: ExperimentConfig, model: MarketModel | None = None):
    """Spatial refinement study; exact oracle for Gaussian economies."""
    model = model or build_model(cfg)
    grids = [grid_for(cfg, model, n) for n in cfg.refine_n_x]
    exact = None
    if cfg.economy == "gaussian" and np.linalg.norm(cfg.b0) > 0.0:
        spec = cf.gaussian_spec_for(model)
        exact = lambda t, x: cf.gaussian_values(spec, t, x)  # noqa: E731
    return refine_study(model, grids, cfg.reg_n, exact=exact, options=solver_options(cfg, keep_slices=False))


def write_refinement(rep, path) -> Path:
    C = rep.errors.shape[1]
    header = ["n_x"] + [f"err_v{c}" for c in range(C)] + [f"order_v{c}" for c in range(C)]
    # successive differences are labelled by the finer grid of each pair
    labels = rep.n_x if rep.against == "exact" else rep.n_x[1:]
    lag = len(rep.errors) - len(rep.orders)
    rows = []
    for i, n in enumerate(labels):
        orders = list(rep.orders[i - lag]) if i >= lag else [""] * C
        rows.append([n] + list(rep.errors[i]) + orders)
    return write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# validation suite


@dataclass
class SuiteResult:
    report: ValidationReport
    exit_code: int
    path: Path | None = None


def _oracle_checks(cfg, model, sol, report) -> None:
    grid = sol.grid
    mask = grid.inner_mask()
    if cfg.economy == "gaussian":
        if not np.linalg.norm(cfg.b0) > 0.0:
            report.add("oracle_values", 0.0, cfg.oracle_tol, True, "skipped: zero dividend has no Gaussian oracle")
            return
        spec = cf.gaussian_spec_for(model)
        err = np.max(np.abs(sol.slice_at(0.0) - cf.gaussian_values(spec, 0.0, grid.nodes))[mask])
        zeta = sol.zmatrix(sol.index_of(0.0), model)[..., 0, :]
        zerr = np.max(np.abs(zeta - spec.b0)[mask])
        report.add("oracle_values", err, cfg.oracle_tol, err < cfg.oracle_tol, "inner 50% at t=0")
        report.add("oracle_zeta", zerr, cfg.oracle_tol, zerr < cfg.oracle_tol, "inner 50% at t=0")
    elif model.dim_d == 1 and model.constant_coefficients:
        econ = scale_economy(model)
        w = np.concatenate([[1.0], econ.alphas])
        agg = sol.slice_at(0.0) @ w
        ref = cf.cole_hopf_aggregate(model, 0.0, grid.axes[0], cfg.quadrature_nodes)
        err = float(np.max(np.abs(agg - ref)[mask]))
        report.add("oracle_cole_hopf", err, cfg.oracle_tol, err < cfg.oracle_tol, "aggregate, inner 50% at t=0")
    elif cfg.economy == "put_option":
        lo, hi = tail_nodes(grid, 1)
        prof = put_option_profile(sol, model, [lo, hi])
        gap = max(np.max(np.abs(prof["premium_incomplete"] - prof["premium_complete"])),
                  np.max(np.abs(prof["totalvol_incomplete"] - prof["totalvol_complete"])))
        report.add("oracle_complete_tails", gap, 5e-3, gap < 5e-3, "premium and total vol at the 90% box tails")


def run_validation_suite(cfg: ExperimentConfig, strict: bool = False, out_dir=None) -> SuiteResult:
    """Run every enabled check, write ``validation_report.csv`` and return the exit code."""
    model = build_model(cfg)
    econ = scale_economy(model)
    report = ValidationReport(seed=cfg.seed, n_paths=cfg.n_paths, n_steps=cfg.n_steps)
    grid = grid_for(cfg, model)

    try:
        margin = check_ellipticity(model, lam=cfg.ellipticity_lambda, seed=cfg.seed, lo=grid.lo, hi=grid.hi)
        report.add("ellipticity", margin, cfg.ellipticity_lambda, True)
    except InvalidModelError as exc:
        report.add("ellipticity", math.nan, cfg.ellipticity_lambda, False, str(exc))

    if cfg.check_structural:
        M = cfg.grad_bound_m if cfg.grad_bound_m is not None else sharp_grad_bound(econ.alphas)
        rep = check_structural_conditions(econ.alphas, cfg.structural_samples, cfg.seed, d=model.dim_d, M=M,
                                          raise_on_violation=False)
        detail = " ".join(f"{k}={v}" for k, v in rep.violations.items()) + f" M={M!r}"
        report.add("structural_conditions", rep.total_violations, 0, rep.ok, detail)

    sol = solve(model, grid, cfg.reg_n, solver_options(cfg))

    if cfg.check_oracle:
        _oracle_checks(cfg, model, sol, report)

    clearing = max_clearing_violation(sol, model, cfg.eps_nodal)
    report.clearing_max_violation = clearing
    report.add("clearing", clearing, cfg.clearing_tol, clearing <= cfg.clearing_tol, "all slices")

    if cfg.check_refine:
        ref = run_refine(cfg, model)
        order = float(np.min(ref.min_order))
        report.add("refine_order", order, cfg.refine_min_order, order >= cfg.refine_min_order,
                   f"{ref.against} n_x={list(ref.n_x)}")

    if cfg.check_ladder:
        ladder = [solve(model, grid, n, solver_options(cfg, keep_slices=False)).slice_at(0.0) for n in cfg.ladder]
        diffs = [float(np.max(np.abs(b - a))) for a, b in zip(ladder, ladder[1:])]
        mono = all(d2 <= d1 for d1, d2 in zip(diffs, diffs[1:]))
        report.add("ladder_monotone", diffs[-1] - diffs[0] if len(diffs) > 1 else 0.0, 0.0, mono,
                   "diffs=" + ";".join(repr(d) for d in diffs))
        report.add("ladder_last", diffs[-1], cfg.ladder_tol, diffs[-1] < cfg.ladder_tol,
                   f"n={cfg.ladder[-2]!r}->{cfg.ladder[-1]!r}")

    if cfg.check_mc:
        field = FieldInterpolant(sol, model)
        if cfg.corrupt_shift > 0.0:
            field = ShiftedField(field, cfg.corrupt_shift)
        batch = simulate(model, field, cfg.n_paths, cfg.n_steps, cfg.seed, strict=strict)
        res = bsde_residual(batch, model, cfg.reg_n)
        norm = float(np.max(res.normalized))
        zmax = float(np.max(np.abs(res.zscores)))
        report.residual_mean_abs = float(np.max(res.mean_abs))
        report.residual_scale = res.scale
        ok = norm < cfg.residual_tol and bool(np.all(res.unbiased(cfg.residual_zmax, cfg.residual_bias_tol)))
        report.add("bsde_residual", norm, cfg.residual_tol, ok,
                   f"max|z|={zmax!r} max|mean|={float(np.max(np.abs(res.mean)))!r} exits={batch.exit_count}")
        mart = martingale_checks(batch, model, cfg.eps_nodal)
        report.martingale_drift_zscores = dict(mart.zscores)
        report.add("martingale", mart.max_abs_z, cfg.martingale_zmax, mart.max_abs_z < cfg.martingale_zmax,
                   " ".join(f"{k}={v!r}" for k, v in mart.zscores.items())
                   + f" excluded={mart.excluded_paths.tolist()}")

    if cfg.check_nodal:
        frac = nodal_set_fraction(sol, cfg.nodal_eps)
        report.nodal_fraction = frac
        report.add("nodal_set", frac, cfg.nodal_max_fraction, frac <= cfg.nodal_max_fraction,
                   f"eps={cfg.nodal_eps!r}")

    path = write_report(report, Path(out_dir or cfg.out) / "validation_report.csv")
    return SuiteResult(report=report, exit_code=0 if report.passed else 1, path=path)


def write_report(report: ValidationReport, path) -> Path:
    meta = [["seed", report.seed, "", "info", ""], ["n_paths", report.n_paths, "", "info", ""],
            ["n_steps", report.n_steps, "", "info", ""]]
    return write_csv(path, REPORT_COLUMNS, meta + report.rows())


def run_gaussian_check(cfg: ExperimentConfig, out_dir=None) -> SuiteResult:
    """Oracle comparison and refinement order for a Gaussian configuration."""
    if cfg.economy != "gaussian":
        raise InvalidModelError("gaussian-check needs economy = gaussian")
    model = build_model(cfg)
    grid = grid_for(cfg, model)
    sol = solve(model, grid, cfg.reg_n, solver_options(cfg, keep_slices=False))
    report = ValidationReport(seed=cfg.seed)
    _oracle_checks(cfg, model, sol, report)
    clearing = max_clearing_violation(sol, model, cfg.eps_nodal)
    report.add("clearing", clearing, cfg.clearing_tol, clearing <= cfg.clearing_tol, "t=0 and t=1")
    ref = run_refine(cfg, model)
    order = float(np.min(ref.min_order))
    report.add("refine_order", order, cfg.refine_min_order, order >= cfg.refine_min_order,
               f"{ref.against} n_x={list(ref.n_x)}")
    path = write_report(report, Path(out_dir or cfg.out) / "gaussian_check.csv")
    return SuiteResult(report=report, exit_code=0 if report.passed else 1, path=path)

