"""Monte Carlo checks of a value field against its probabilistic meaning.

Paths of the forward state are simulated by Euler-Maruyama with a Philox
(counter-based) generator, so a seed fixes every stream.  Along each path the
field supplies ``Y = v(t, X)`` and ``Z = grad(v) sigma (t, X)``; the backward
equation residual and the pricing-measure martingale identities are then
estimated with standard errors.

A *field* is any object with ``values(t, x) -> (..., I+1)`` and
``zmatrix(t, x) -> (..., I+1, d)``; an optional ``box = (lo, hi)`` attribute
enables absorption at the truncation boundary.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .economy import MarketModel, scale_economy
from .equilibrium import EPS_NODAL, positions
from .generator import RegularizationParams, f_reg
from .pde_solver import SolutionField, gradient


# Relative floor on standard errors: a field that is exact up to roundoff has
# residuals of order 1e-15 whose sample spread is meaningless.
ROUNDOFF_FLOOR = 1e-12


class DomainTooSmallError(RuntimeError):
    pass


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


class FieldInterpolant:
    """Multilinear-in-space, linear-in-time view of a :class:`SolutionField`."""

    def __init__(self, sol: SolutionField, model: MarketModel):
        if len(sol.times) < 2:
            raise ValueError("interpolation in time needs at least two stored slices")
        self.sol = sol
        self.model = model
        self.box = (np.asarray(sol.grid.lo), np.asarray(sol.grid.hi))
        self._cache = {}

    def _bracket(self, t):
        times = self.sol.times
        k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
        w = (t - times[k]) / (times[k + 1] - times[k])
        return k, float(np.clip(w, 0.0, 1.0))

    def _interp(self, key, k, make):
        if key + (k,) not in self._cache:
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[key + (k,)] = RegularGridInterpolator(self.sol.grid.axes, make(k), method="linear",
                                                              bounds_error=False, fill_value=None)
        return self._cache[key + (k,)]

    def _eval(self, key, make, t, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        k, w = self._bracket(t)
        lo = self._interp(key, k, make)(flat)
        out = lo if w == 0.0 else (1.0 - w) * lo + w * self._interp(key, k + 1, make)(flat)
        return out.reshape(x.shape[:-1] + out.shape[1:])

    def values(self, t, x):
        return self._eval(("v",), lambda k: self.sol.values[k], t, x)

    def zmatrix(self, t, x):
        grad = self._eval(("g",), lambda k: gradient(self.sol.values[k], self.sol.grid), t, x)
        return grad @ self.model.vol_sigma(t, np.asarray(x, dtype=float))


class ShiftedField:
    """Adds a constant to one component of a field (sensitivity harness)."""

    def __init__(self, base, shift: float, component: int = 0):
        self.base = base
        self.shift = shift
        self.component = component
        self.box = getattr(base, "box", None)

    def values(self, t, x):
        v = np.array(self.base.values(t, x), dtype=float)
        v[..., self.component] += self.shift
        return v

    def zmatrix(self, t, x):
        return self.base.zmatrix(t, x)


@dataclass
class PathBatch:
    n_paths: int
    n_steps: int
    seed: int
    times: np.ndarray
    X: np.ndarray  # (n_steps + 1, n_paths, d)
    dW: np.ndarray  # (n_steps, n_paths, d)
    exited: np.ndarray
    field: object = field(repr=False)

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps

    @property
    def exit_count(self) -> int:
        return int(np.count_nonzero(self.exited))

    def values(self, k: int) -> np.ndarray:
        return np.asarray(self.field.values(self.times[k], self.X[k]), dtype=float)

    def zmatrix(self, k: int) -> np.ndarray:
        return np.asarray(self.field.zmatrix(self.times[k], self.X[k]), dtype=float)

    def increment_variance_zscore(self) -> float:
        """z-score of the pooled sample variance of increments against ``dt``."""
        inc = self.dW.reshape(-1)
        n = inc.size
        var = float(np.mean(inc * inc))
        return (var - self.dt) / (self.dt * np.sqrt(2.0 / n))


def simulate(model: MarketModel, field, n_paths: int, n_steps: int, seed: int,
             strict: bool = False, max_exit_fraction: float = 0.05) -> PathBatch:
    """Euler-Maruyama paths from ``X0``; paths leaving ``field.box`` are frozen there."""
    if n_paths < 1 or n_steps < 1:
        raise ValueError("n_paths and n_steps must be positive")
    rng = rng_for(seed)
    d = model.dim_d
    dt = 1.0 / n_steps
    dW = rng.standard_normal((n_steps, n_paths, d)) * np.sqrt(dt)
    X = np.empty((n_steps + 1, n_paths, d))
    X[0] = model.x0
    alive = np.ones(n_paths, dtype=bool)
    box = getattr(field, "box", None)
    times = np.linspace(0.0, 1.0, n_steps + 1)
    for k in range(n_steps):
        x = X[k]
        step = model.drift_b(times[k], x) * dt + np.einsum("pij,pj->pi", model.vol_sigma(times[k], x), dW[k])
        nxt = x + np.where(alive[:, None], step, 0.0)
        if box is not None:
            lo, hi = box
            out = np.any((nxt < lo) | (nxt > hi), axis=-1)
            nxt = np.clip(nxt, lo, hi)
            alive &= ~out
        X[k + 1] = nxt
    batch = PathBatch(n_paths=n_paths, n_steps=n_steps, seed=seed, times=times, X=X, dW=dW,
                      exited=~alive, field=field)
    frac = batch.exit_count / n_paths
    if frac > max_exit_fraction:
        msg = f"{batch.exit_count} of {n_paths} paths left the grid box"
        if strict:
            raise DomainTooSmallError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return batch


def _zscore(mean, se):
    mean = np.asarray(mean, dtype=float)
    se = np.asarray(se, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0.0, mean / np.where(se > 0.0, se, 1.0), np.where(mean == 0.0, 0.0, np.inf))
    return z


@dataclass
class ResidualStats:
    mean_abs: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    scale: float

    @property
    def normalized(self) -> np.ndarray:
        return self.mean_abs / self.scale

    @property
    def zscores(self) -> np.ndarray:
        return _zscore(self.mean, np.maximum(self.stderr, ROUNDOFF_FLOOR * self.scale))

    def unbiased(self, zmax: float, bias_tol: float = 0.0) -> np.ndarray:
        """Per component: signed mean within ``zmax`` standard errors or below ``bias_tol * scale``.

        ``bias_tol`` admits the deterministic discretization bias of a grid
        field, whose sample noise can be far smaller than that bias.
        """
        return (np.abs(self.zscores) < zmax) | (np.abs(self.mean) <= bias_tol * self.scale)


def residual_decays(coarse: ResidualStats, fine: ResidualStats, ratio: float = 0.6) -> bool:
    """``mean|res|`` shrinks by ``ratio`` per refinement, or both sit at the roundoff floor."""
    floor = ROUNDOFF_FLOOR * max(coarse.scale, fine.scale)
    if np.all(coarse.mean_abs <= floor) and np.all(fine.mean_abs <= floor):
        return True
    live = coarse.mean_abs > floor
    return bool(np.all(fine.mean_abs[live] <= ratio * coarse.mean_abs[live])
                and np.all(fine.mean_abs[~live] <= floor))


def bsde_residual(batch: PathBatch, model: MarketModel, reg_n: float) -> ResidualStats:
    """Pathwise ``Y_0 - [g(X_1) + sum f_n(X, Z) dt - sum Z dW]`` per component."""
    econ = scale_economy(model)
    reg = RegularizationParams(reg_n)
    dt = batch.dt
    y0 = batch.values(0)
    drift = np.zeros_like(y0)
    mart = np.zeros_like(y0)
    for k in range(batch.n_steps):
        z = batch.zmatrix(k)
        drift += f_reg(batch.X[k], z, reg, econ.alphas) * dt
        mart += np.einsum("pcj,pj->pc", z, batch.dW[k])
    g = econ.terminal(batch.X[-1])
    res = y0 - (g + drift - mart)
    n = res.shape[0]
    scale = float(np.max(np.abs(g)))
    return ResidualStats(
        mean_abs=np.mean(np.abs(res), axis=0),
        mean=np.mean(res, axis=0),
        stderr=np.std(res, axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(res.shape[1]),
        scale=scale if scale > 0.0 else 1.0,
    )


@dataclass
class MartingaleReport:
    zscores: dict
    excluded_paths: np.ndarray
    means: dict = field(default_factory=dict)

    @property
    def max_abs_z(self) -> float:
        vals = [abs(v) for v in self.zscores.values()]
        return max(vals) if vals else 0.0


def martingale_checks(batch: PathBatch, model: MarketModel, eps_nodal: float = EPS_NODAL,
                      theta_shift: float = 0.0, log_cap: float = 50.0) -> MartingaleReport:
    """Sample tests of ``E[Z^i_1 S_1] = S_0`` and ``E[Z^i_1 (theta^i . S)_1] = 0``.

    ``Z^i`` is the discrete stochastic exponential of
    ``-(gamma_i + theta_i zeta) . W``; paths with ``|log Z^i| > log_cap`` are
    excluded and counted.  ``theta_shift`` perturbs every position (used to
    exercise the check's sensitivity).
    """
    econ = scale_economy(model)
    alphas = econ.alphas
    n_agents = alphas.size
    dt = batch.dt
    log_z = np.zeros((batch.n_paths, n_agents))
    gains = np.zeros((batch.n_paths, n_agents))
    s0 = batch.values(0)[:, 0]
    s_prev = s0
    for k in range(batch.n_steps):
        z = batch.zmatrix(k)
        zeta, gam = z[:, 0, :], z[:, 1:, :]
        theta, _ = positions(zeta, gam, alphas, eps_nodal)
        theta = theta + theta_shift
        kernel = gam + theta[..., None] * zeta[:, None, :]
        log_z += -np.einsum("pij,pj->pi", kernel, batch.dW[k]) - 0.5 * np.sum(kernel * kernel, axis=-1) * dt
        if k + 1 < batch.n_steps:
            s_next = batch.values(k + 1)[:, 0]
        else:
            s_next = econ.scaled_dividend(batch.X[-1])
        gains += theta * (s_next - s_prev)[:, None]
        s_prev = s_next
    s1 = s_prev

    zs, means = {}, {}
    flagged = np.abs(log_z) > log_cap
    for i in range(n_agents):
        ok = ~flagged[:, i]
        dens = np.exp(log_z[ok, i])
        n = int(np.count_nonzero(ok))
        a = dens * s1[ok] - s0[ok]
        b = dens * gains[ok, i]
        for name, sample in ((f"price[{i + 1}]", a), (f"gains[{i + 1}]", b)):
            se = np.std(sample, ddof=1) / np.sqrt(n) if n > 1 else 0.0
            means[name] = float(np.mean(sample))
            zs[name] = float(_zscore(means[name], se))
    return MartingaleReport(zscores=zs, excluded_paths=np.count_nonzero(flagged, axis=0), means=means)


@dataclass
class ValidationReport:
    """Flat record of every validation quantity, serializable as CSV rows."""

    residual_mean_abs: float = 0.0
    residual_scale: float = 1.0
    clearing_max_violation: float = 0.0
    martingale_drift_zscores: dict = field(default_factory=dict)
    nodal_fraction: float = 0.0
    seed: int = 0
    n_paths: int = 0
    n_steps: int = 0
    checks: list = field(default_factory=list)

    def add(self, name: str, value: float, threshold: float, passed: bool, detail: str = "") -> None:
        self.checks.append({"check": name, "value": float(value), "threshold": float(threshold),
                            "passed": bool(passed), "detail": detail})

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    @property
    def failing(self) -> list:
        return [c["check"] for c in self.checks if not c["passed"]]

    def rows(self) -> list:
        return [[c["check"], c["value"], c["threshold"], "pass" if c["passed"] else "fail", c["detail"]]
                for c in self.checks]
