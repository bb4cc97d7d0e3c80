"""Backward IMEX finite-difference solver for the coupled semilinear system

    d_t v^i + L v^i + f^i_n(x, grad(v) sigma) = 0,   v^i(1, .) = g^i (scaled),

on a truncated box in one or two space dimensions.

Each step evaluates the regularized generator on the already-known later
slice, then solves ``(Id - dt L_h) v = v_next + dt * source`` per component.
In 2D the implicit operator is split into two tridiagonal sweeps and mixed
second derivatives are moved into the explicit source.  Ghost nodes obtained
by linear extrapolation close the boundary (zero second normal derivative).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .economy import MarketModel, ScaledEconomy, scale_economy
from .generator import RegularizationParams, f_reg
from .tridiag import solve_tridiagonal


class InvalidGridError(ValueError):
    pass


class NonNestedGridError(ValueError):
    pass


class BlowUpError(RuntimeError):
    def __init__(self, message: str, node=None, t=None):
        self.node = node
        self.t = t
        super().__init__(message)


class LinearSolveError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on ``prod_j [lo_j, hi_j]`` with ``n_t`` steps on [0, 1].

    Node ``(i, j)`` of a 2D grid has flat index ``i * n_x[1] + j``.
    """

    lo: tuple
    hi: tuple
    n_x: tuple
    n_t: int

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple:
        return tuple(self.n_x)

    @cached_property
    def axes(self) -> tuple:
        out = tuple(np.linspace(a, b, n) for a, b, n in zip(self.lo, self.hi, self.n_x))
        for ax in out:
            ax.flags.writeable = False
        return out

    @property
    def spacing(self) -> tuple:
        return tuple((b - a) / (n - 1) for a, b, n in zip(self.lo, self.hi, self.n_x))

    @cached_property
    def nodes(self) -> np.ndarray:
        """Coordinates, shape ``(*shape, d)``."""
        out = np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)
        out.flags.writeable = False
        return out

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_t + 1)

    @property
    def dt(self) -> float:
        return 1.0 / self.n_t

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    def inner_mask(self, fraction: float = 0.5) -> np.ndarray:
        """Nodes within the central ``fraction`` of every axis."""
        masks = []
        for ax, a, b in zip(self.axes, self.lo, self.hi):
            half = 0.5 * fraction * (b - a)
            c = 0.5 * (a + b)
            masks.append(np.abs(ax - c) <= half * (1.0 + 1e-12))
        return np.logical_and.reduce(np.meshgrid(*masks, indexing="ij"))

    def contains(self, x, strict: bool = True) -> bool:
        x = np.asarray(x, dtype=float)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        if strict:
            return bool(np.all(x > lo) and np.all(x < hi))
        return bool(np.all(x >= lo) and np.all(x <= hi))

    def node_index(self, x, tol: float = 1e-9) -> tuple:
        """Multi-index of the node at ``x``; raises ``KeyError`` when off-grid."""
        idx = []
        for ax, h, xj in zip(self.axes, self.spacing, np.atleast_1d(x)):
            k = int(round((xj - ax[0]) / h))
            if k < 0 or k >= ax.size or abs(ax[k] - xj) > tol * max(1.0, h):
                raise KeyError(f"point {np.atleast_1d(x).tolist()} is not a grid node")
            idx.append(k)
        return tuple(idx)


def build_grid(box, n_x, n_t: int, x0=None) -> Grid:
    box = [tuple(map(float, b)) for b in np.atleast_2d(np.asarray(box, dtype=float))]
    d = len(box)
    if d not in (1, 2):
        raise InvalidGridError(f"only 1D and 2D grids are supported, got d={d}")
    n_x = tuple(int(n) for n in (np.broadcast_to(n_x, (d,))))
    for n in n_x:
        if n < 3:
            raise InvalidGridError(f"n_x must be at least 3 per axis, got {n}")
    for lo, hi in box:
        if not hi > lo:
            raise InvalidGridError(f"degenerate box axis [{lo}, {hi}]")
    if int(n_t) < 1:
        raise InvalidGridError("n_t must be a positive integer")
    grid = Grid(lo=tuple(b[0] for b in box), hi=tuple(b[1] for b in box), n_x=n_x, n_t=int(n_t))
    if x0 is not None and not grid.contains(x0):
        raise InvalidGridError(f"initial state {np.atleast_1d(x0).tolist()} lies outside the box")
    return grid


def default_box(model: MarketModel, m: float = 5.0) -> list:
    """``X0 +- m * sigma_max * sqrt(T)`` per axis."""
    probes = [model.diffusion_matrix(t, model.x0[None, :])[0] for t in (0.0, 0.5, 1.0)]
    var = np.max(np.stack([np.diag(a) for a in probes]), axis=0)
    width = m * np.sqrt(var)
    return [(float(c - w), float(c + w)) for c, w in zip(model.x0, width)]


# ---------------------------------------------------------------------------
# spatial operators


def gradient(slice_, grid: Grid) -> np.ndarray:
    """Gradient of a ``(*shape, C)`` slice, returned as ``(*shape, C, d)``.

    Central differences inside, second-order one-sided differences on the
    boundary.
    """
    slice_ = np.asarray(slice_, dtype=float)
    parts = [np.gradient(slice_, h, axis=j, edge_order=2) for j, h in enumerate(grid.spacing)]
    return np.stack(parts, axis=-1)


def _mixed_derivative(slice_, grid: Grid) -> np.ndarray:
    h0, h1 = grid.spacing
    return np.gradient(np.gradient(slice_, h0, axis=0, edge_order=2), h1, axis=1, edge_order=2)


def _axis_coefficients(a, b, h: float, dt: float, axis: int):
    """Tridiagonal rows of ``Id - dt (a d_jj + b d_j)`` along ``axis``, moved last."""
    a = np.moveaxis(a, axis, -1)
    b = np.moveaxis(b, axis, -1)
    diff = dt * a / (h * h)
    adv = dt * b / (2.0 * h)
    lower = -(diff - adv)
    diag = 1.0 + 2.0 * diff
    upper = -(diff + adv)
    # linear-extrapolation ghosts: second difference vanishes, first is one-sided
    lower = lower.copy()
    diag = diag.copy()
    upper = upper.copy()
    diag[..., 0] = 1.0 + dt * b[..., 0] / h
    upper[..., 0] = -dt * b[..., 0] / h
    lower[..., 0] = 0.0
    diag[..., -1] = 1.0 - dt * b[..., -1] / h
    lower[..., -1] = dt * b[..., -1] / h
    upper[..., -1] = 0.0
    return lower, diag, upper


@dataclass
class _ImplicitOperator:
    """Split implicit operator at one time, plus the coefficients the explicit
    source needs at that time."""

    grid: Grid
    rows: list  # per axis (lower, diag, upper), each (..., n_axis)
    sigma: np.ndarray
    cross: np.ndarray | None
    threads: int = 1

    @classmethod
    def build(cls, grid: Grid, model: MarketModel, t: float, threads: int = 1):
        nodes = grid.nodes
        sig = model.vol_sigma(t, nodes)
        amat = sig @ np.swapaxes(sig, -1, -2)
        drift = model.drift_b(t, nodes)
        rows = []
        for j, h in enumerate(grid.spacing):
            rows.append(_axis_coefficients(0.5 * amat[..., j, j], drift[..., j], h, grid.dt, j))
        cross = None
        if grid.d == 2 and np.any(amat[..., 0, 1] != 0.0):
            cross = amat[..., 0, 1].copy()
        return cls(grid=grid, rows=rows, sigma=sig, cross=cross, threads=threads)

    def _sweep(self, rhs):
        # rhs: (C, *shape); coefficient rows broadcast over the leading axis
        out = rhs
        for j, (lo, di, up) in enumerate(self.rows):
            moved = np.moveaxis(out, j + 1, -1)
            out = np.moveaxis(solve_tridiagonal(lo, di, up, moved), -1, j + 1)
        return out

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for every component of a ``(*shape, C)`` right-hand side."""
        stacked = np.moveaxis(rhs, -1, 0)
        if self.threads > 1 and stacked.shape[0] > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                parts = list(pool.map(self._sweep, [c[None] for c in stacked]))
            out = np.concatenate(parts, axis=0)
        else:
            out = self._sweep(stacked)
        if not np.all(np.isfinite(out)) and np.all(np.isfinite(rhs)):
            raise LinearSolveError("tridiagonal sweep produced non-finite values from finite data")
        return np.moveaxis(out, 0, -1)


# ---------------------------------------------------------------------------
# stepping


@dataclass(frozen=True)
class SolverOptions:
    """Knobs of :func:`solve`.

    ``bound_margin`` is the relative slack of the discrete maximum-principle
    bound; ``fixed_point_passes`` re-evaluates the source at the new slice;
    ``keep_slices=False`` stores only ``t = 0`` and ``t = 1``.
    """

    bound_margin: float = 0.1
    fixed_point_passes: int = 0
    keep_slices: bool = True
    threads: int = 1


def _source(v, grid: Grid, econ: ScaledEconomy, reg: RegularizationParams, nodes, sigma, cross):
    z = gradient(v, grid) @ sigma
    s = f_reg(nodes, z, reg, econ.alphas)
    if cross is not None:
        s = s + cross[..., None] * _mixed_derivative(v, grid)
    return s


def step_backward(v_next, t_k: float, grid: Grid, econ: ScaledEconomy, reg: RegularizationParams,
                  operator: _ImplicitOperator | None = None, fixed_point_passes: int = 0):
    """One IMEX step from ``t_k + dt`` to ``t_k``.  Returns ``(v_k, sup|source|)``.

    The generator sees ``grad(v_next) sigma(t_k + dt)``; diffusion, drift and
    mixed-derivative coefficients are taken at ``t_k``.
    """
    v_next = np.asarray(v_next, dtype=float)
    nodes = grid.nodes
    model = econ.model
    if operator is None:
        operator = _ImplicitOperator.build(grid, model, t_k)
    sig_next = operator.sigma if model.constant_coefficients else model.vol_sigma(t_k + grid.dt, nodes)
    s = _source(v_next, grid, econ, reg, nodes, sig_next, operator.cross)
    v = operator.solve(v_next + grid.dt * s)
    for _ in range(fixed_point_passes):
        s = _source(v, grid, econ, reg, nodes, operator.sigma, operator.cross)
        v = operator.solve(v_next + grid.dt * s)
    if not np.all(np.isfinite(v)):
        bad = np.argwhere(~np.isfinite(v))[0]
        raise BlowUpError(f"non-finite value at node {tuple(bad[:-1])}, component {bad[-1]}, t={t_k:.6g}",
                          node=tuple(int(i) for i in bad[:-1]), t=t_k)
    return v, float(np.max(np.abs(s)))


@dataclass
class SolutionField:
    """Grid-sampled value functions ``v = (v0, ..., vI)``.

    ``values[k]`` is the slice at ``times[k]`` with shape ``(*grid.shape, I + 1)``.
    """

    grid: Grid
    times: np.ndarray
    values: np.ndarray
    reg_n: float
    sup_norms: np.ndarray
    bounds: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    _grad_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_components(self) -> int:
        return self.values.shape[-1]

    def index_of(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-12:
            raise KeyError(f"t={t} is not a stored time slice")
        return k

    def slice_at(self, t: float) -> np.ndarray:
        return self.values[self.index_of(t)]

    def gradient(self, k: int) -> np.ndarray:
        if k not in self._grad_cache:
            g = gradient(self.values[k], self.grid)
            g.flags.writeable = False
            self._grad_cache[k] = g
        return self._grad_cache[k]

    def zmatrix(self, k: int, model: MarketModel) -> np.ndarray:
        return self.gradient(k) @ model.vol_sigma(self.times[k], self.grid.nodes)


def solve(model: MarketModel, grid: Grid, reg_n: float, options: SolverOptions | None = None) -> SolutionField:
    """Full backward sweep from ``t = 1`` to ``t = 0``."""
    options = options or SolverOptions()
    if not reg_n > 0:
        raise ValueError("reg_n must be positive")
    if grid.d != model.dim_d:
        raise InvalidGridError(f"grid dimension {grid.d} does not match model dimension {model.dim_d}")
    if not grid.contains(model.x0):
        raise InvalidGridError("initial state lies outside the box")
    econ = scale_economy(model)
    reg = RegularizationParams(reg_n)
    nodes = grid.nodes
    times = grid.times

    v = econ.terminal(nodes)
    if not np.all(np.isfinite(v)):
        raise BlowUpError("terminal data is not finite on the grid")

    n_t = grid.n_t
    sup_norms = np.empty(n_t + 1)
    bounds = np.empty(n_t + 1)
    sup_norms[n_t] = bounds[n_t] = np.max(np.abs(v))
    kept = {n_t: v}

    operator = None
    if model.constant_coefficients:
        operator = _ImplicitOperator.build(grid, model, 0.0, options.threads)
    for k in range(n_t - 1, -1, -1):
        op = operator or _ImplicitOperator.build(grid, model, times[k], options.threads)
        v, smax = step_backward(v, times[k], grid, econ, reg, op, options.fixed_point_passes)
        sup_norms[k] = np.max(np.abs(v))
        bounds[k] = bounds[k + 1] + grid.dt * smax
        if sup_norms[k] > (1.0 + options.bound_margin) * bounds[k] + 1e-12:
            node = np.unravel_index(int(np.argmax(np.max(np.abs(v), axis=-1))), grid.shape)
            raise BlowUpError(
                f"sup-norm {sup_norms[k]:.6g} exceeds monitored bound {bounds[k]:.6g} at t={times[k]:.6g}",
                node=tuple(int(i) for i in node), t=float(times[k]))
        if options.keep_slices or k == 0:
            kept[k] = v

    order = sorted(kept)
    values = np.stack([kept[k] for k in order])
    values.flags.writeable = False
    return SolutionField(
        grid=grid,
        times=times[order],
        values=values,
        reg_n=float(reg_n),
        sup_norms=sup_norms,
        bounds=bounds,
        diagnostics={"fixed_point_passes": options.fixed_point_passes},
    )


# ---------------------------------------------------------------------------
# refinement


@dataclass
class RefinementReport:
    n_x: list
    errors: np.ndarray  # (levels or levels - 1, C)
    orders: np.ndarray  # (pairs, C); +inf marks errors at the roundoff floor
    against: str

    @property
    def min_order(self) -> np.ndarray:
        return np.min(self.orders, axis=0)


def _check_nested(grids) -> None:
    if len(grids) < 3:
        raise NonNestedGridError("a refinement study needs at least three resolutions")
    base = grids[0]
    for coarse, fine in zip(grids, grids[1:]):
        if fine.lo != base.lo or fine.hi != base.hi or fine.n_t != base.n_t:
            raise NonNestedGridError("refinement grids must share the box and time steps")
        for nc, nf in zip(coarse.n_x, fine.n_x):
            if nf <= nc or (nf - 1) % (nc - 1) != 0:
                raise NonNestedGridError(f"grid with {nf} nodes does not nest {nc}")


def _restrict(values: np.ndarray, fine: Grid, coarse: Grid) -> np.ndarray:
    idx = tuple(slice(None, None, (nf - 1) // (nc - 1)) for nf, nc in zip(fine.n_x, coarse.n_x))
    return values[idx]


def _order(e_coarse, e_fine, ratio, floor):
    if e_fine <= floor:
        return math.inf
    return math.log(e_coarse / e_fine) / math.log(ratio)


def refine_study(model: MarketModel, grids, reg_n: float, exact=None,
                 options: SolverOptions | None = None, floor: float = 1e-12) -> RefinementReport:
    """Observed spatial order of ``v(0, .)`` over nested grids.

    With ``exact`` (a callable ``(t, x) -> (..., C)``) errors are measured
    against it on the inner half of every grid; otherwise successive
    differences of three consecutive levels give the order.  Errors at or
    below ``floor`` (relative to the solution scale) count as exact and
    report an infinite order.
    """
    grids = list(grids)
    _check_nested(grids)
    opts = options or SolverOptions(keep_slices=False)
    sols = [solve(model, g, reg_n, opts).slice_at(0.0) for g in grids]
    scale = max(1.0, float(np.max(np.abs(sols[-1]))))
    floor = floor * scale
    n_x = [g.n_x[0] for g in grids]
    coarsest = grids[0]
    mask = coarsest.inner_mask()

    if exact is not None:
        errs = []
        for g, u in zip(grids, sols):
            ref = exact(0.0, g.nodes)
            errs.append(np.max(np.abs(u - ref)[g.inner_mask()], axis=0))
        errs = np.array(errs)
        ratios = [g2.n_x[0] - 1 for g2 in grids]
        orders = np.array([[_order(errs[i, c], errs[i + 1, c], (ratios[i + 1]) / ratios[i], floor)
                            for c in range(errs.shape[1])] for i in range(len(grids) - 1)])
        return RefinementReport(n_x=n_x, errors=errs, orders=orders, against="exact")

    diffs = []
    for g1, u1, g2, u2 in zip(grids, sols, grids[1:], sols[1:]):
        d = _restrict(u1, g1, coarsest) - _restrict(u2, g2, coarsest)
        diffs.append(np.max(np.abs(d)[mask], axis=0))
    diffs = np.array(diffs)
    ratios = [g.n_x[0] - 1 for g in grids]
    orders = np.array([[_order(diffs[i, c], diffs[i + 1, c], ratios[i + 1] / ratios[i], floor)
                        for c in range(diffs.shape[1])] for i in range(len(diffs) - 1)])
    return RefinementReport(n_x=n_x, errors=diffs, orders=orders, against="successive")
