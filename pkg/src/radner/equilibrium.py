"""Equilibrium quantities derived from a solved value field.

With ``Z = grad(v) sigma``, row 0 is the stock volatility ``zeta`` and rows
``1..I`` the certainty-equivalent volatilities ``gamma_i``.  Positions follow

    theta_i = 1 + (sum_k alpha_k gamma_k - gamma_i) . zeta / |zeta|^2,

and wherever ``|zeta| < eps_nodal`` every agent holds ``theta_i = 1``, which
clears the market exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .economy import MarketModel, scale_economy
from .pde_solver import SolutionField, gradient

EPS_NODAL = 1e-8


def drift(zeta, gammas, alphas) -> np.ndarray:
    """Scaled instantaneous drift ``(sum_k alpha_k gamma_k + zeta) . zeta``."""
    zeta = np.asarray(zeta, dtype=float)
    m = np.einsum("k,...kj->...j", np.asarray(alphas, dtype=float), np.asarray(gammas, dtype=float))
    return np.einsum("...j,...j->...", m + zeta, zeta)


def positions(zeta, gammas, alphas, eps_nodal: float = EPS_NODAL):
    """Scaled positions ``theta`` of shape ``(..., I)`` and the fallback mask."""
    zeta = np.asarray(zeta, dtype=float)
    gammas = np.asarray(gammas, dtype=float)
    m = np.einsum("k,...kj->...j", np.asarray(alphas, dtype=float), gammas)
    nsq = np.einsum("...j,...j->...", zeta, zeta)
    flag = np.sqrt(nsq) < eps_nodal
    denom = np.where(flag, 1.0, nsq)
    hedge = np.einsum("...kj,...j->...k", m[..., None, :] - gammas, zeta) / denom[..., None]
    theta = np.where(flag[..., None], 1.0, 1.0 + hedge)
    return theta, flag


@dataclass(frozen=True)
class EquilibriumField:
    """Per time slice and node: ``zeta (.., d)``, ``gammas (.., I, d)``,
    ``thetas (.., I)`` and scalar fields."""

    times: np.ndarray
    grid: object
    alphas: np.ndarray
    sum_delta: float
    zeta: np.ndarray
    gammas: np.ndarray
    thetas: np.ndarray
    drift_mu: np.ndarray
    premium_unscaled: np.ndarray
    total_vol_unscaled: np.ndarray
    zeta_zero_flag: np.ndarray

    def clearing_violation(self) -> float:
        """Max of ``|sum_i alpha_i theta_i - 1|`` over non-fallback nodes."""
        agg = self.thetas @ self.alphas
        live = ~self.zeta_zero_flag
        if not np.any(live):
            return 0.0
        return float(np.max(np.abs(agg[live] - 1.0)))


def from_zmatrix(z, alphas, sum_delta: float, eps_nodal: float = EPS_NODAL) -> dict:
    zeta = z[..., 0, :]
    gammas = z[..., 1:, :]
    theta, flag = positions(zeta, gammas, alphas, eps_nodal)
    mu = drift(zeta, gammas, alphas)
    return dict(
        zeta=zeta,
        gammas=gammas,
        thetas=theta,
        drift_mu=mu,
        premium_unscaled=sum_delta * mu,
        total_vol_unscaled=sum_delta * np.sqrt(np.einsum("...j,...j->...", zeta, zeta)),
        zeta_zero_flag=flag,
    )


def extract(field: SolutionField, model: MarketModel, eps_nodal: float = EPS_NODAL,
            slices=None) -> EquilibriumField:
    """Equilibrium quantities on every stored slice (or the given slice indices)."""
    econ = scale_economy(model)
    idx = range(len(field.times)) if slices is None else list(slices)
    z = np.stack([field.zmatrix(k, model) for k in idx])
    parts = from_zmatrix(z, econ.alphas, econ.sum_delta, eps_nodal)
    return EquilibriumField(times=field.times[list(idx)], grid=field.grid, alphas=econ.alphas,
                            sum_delta=econ.sum_delta, **parts)


@dataclass(frozen=True)
class UnscaledSummary:
    premium: float
    total_vol: float
    positions: np.ndarray


def unscaled_summary(eq: EquilibriumField, model: MarketModel, t: float, x) -> UnscaledSummary:
    """Premium, total volatility and unscaled positions ``alpha_i theta_i`` at a node."""
    k = int(np.argmin(np.abs(eq.times - t)))
    if abs(eq.times[k] - t) > 1e-12:
        raise KeyError(f"t={t} is not a stored time slice")
    node = eq.grid.node_index(x)
    sd = float(np.sum(model.deltas))
    return UnscaledSummary(
        premium=sd * float(eq.drift_mu[(k,) + node]),
        total_vol=sd * float(np.linalg.norm(eq.zeta[(k,) + node])),
        positions=eq.alphas * eq.thetas[(k,) + node],
    )


def cell_weights(grid, times) -> np.ndarray:
    """Trapezoid weights over (time slice, node); boundary entries get half weight."""
    ws = []
    for n in grid.shape:
        w = np.ones(n)
        w[0] = w[-1] = 0.5
        ws.append(w)
    space = ws[0] if len(ws) == 1 else np.multiply.outer(ws[0], ws[1])
    if len(times) > 1:
        dt = np.diff(times)
        wt = np.zeros(len(times))
        wt[:-1] += 0.5 * dt
        wt[1:] += 0.5 * dt
    else:
        wt = np.ones(1)
    return np.multiply.outer(wt, space)


def nodal_set_fraction(field: SolutionField, eps: float) -> float:
    """Weighted fraction of space-time cells with ``|grad v0| < eps``."""
    w = cell_weights(field.grid, field.times)
    hit = total = 0.0
    for k in range(len(field.times)):
        g0 = gradient(field.values[k][..., :1], field.grid)[..., 0, :]
        small = np.sqrt(np.sum(g0 * g0, axis=-1)) < eps
        # same summation order for both sums keeps the all-hit case exactly 1
        hit += float(np.sum(np.where(small, w[k], 0.0)))
        total += float(np.sum(w[k]))
    return hit / total


def max_clearing_violation(field: SolutionField, model: MarketModel, eps_nodal: float = EPS_NODAL) -> float:
    """``max |sum_i alpha_i theta_i - 1|`` over non-fallback nodes of every stored slice."""
    econ = scale_economy(model)
    worst = 0.0
    for k in range(len(field.times)):
        z = gradient(field.values[k], field.grid) @ model.vol_sigma(field.times[k], field.grid.nodes)
        theta, flag = positions(z[..., 0, :], z[..., 1:, :], econ.alphas, eps_nodal)
        live = ~flag
        if np.any(live):
            worst = max(worst, float(np.max(np.abs(theta[live] @ econ.alphas - 1.0))))
    return worst
