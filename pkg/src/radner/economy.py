"""Economies: state diffusion, payoffs, risk tolerances, and the CARA scaling.

Every callable here is vectorized over leading axes: a state array ``x`` of
shape ``(..., d)`` maps to a payoff array of shape ``(...)``, a drift of shape
``(..., d)`` and a volatility of shape ``(..., d, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy.interpolate import RegularGridInterpolator


class InvalidModelError(ValueError):
    """Raised when an economy violates its construction invariants."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# coefficients


@dataclass(frozen=True)
class ConstantDrift:
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "b", _frozen(np.atleast_1d(self.b)))

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.b, x.shape).copy()


@dataclass(frozen=True)
class ConstantVolatility:
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sigma", _frozen(np.atleast_2d(self.sigma)))

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        d = self.sigma.shape[0]
        return np.broadcast_to(self.sigma, x.shape[:-1] + (d, d)).copy()


# ---------------------------------------------------------------------------
# payoffs


@dataclass(frozen=True)
class LinearPayoff:
    """``x -> coef . x + const``."""

    coef: np.ndarray
    const: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "coef", _frozen(np.atleast_1d(self.coef)))

    def __call__(self, x):
        return np.asarray(x, dtype=float) @ self.coef + self.const


@dataclass(frozen=True)
class PolynomialPayoff:
    """Sum of monomials ``c * prod_j x_j**p_j``.

    ``terms`` is a sequence of ``(c, (p_1, ..., p_d))`` pairs.
    """

    terms: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "terms", tuple((float(c), tuple(int(p) for p in pw)) for c, pw in self.terms)
        )

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for c, powers in self.terms:
            if len(powers) != x.shape[-1]:
                raise InvalidModelError("monomial exponent count does not match state dimension")
            mono = np.ones(x.shape[:-1])
            for j, p in enumerate(powers):
                if p:
                    mono = mono * x[..., j] ** p
            out = out + c * mono
        return out


# Triweight kernel (35/32)(1-u^2)^3 on [-1, 1]: C^2 and compactly supported.
_KERNEL = Polynomial([1.0, 0.0, -1.0]) ** 3 * (35.0 / 32.0)
_KERNEL_CDF = _KERNEL.integ(lbnd=-1.0)
_KERNEL_FIRST_MOMENT = (Polynomial([0.0, 1.0]) * _KERNEL).integ(lbnd=-1.0)


def smoothed_ramp(y, eps: float):
    """``max(y, 0)`` convolved with a triweight bump of half-width ``eps``.

    Equals the ramp exactly for ``|y| >= eps``; ``eps = 0`` returns the kink.
    """
    y = np.asarray(y, dtype=float)
    if eps <= 0.0:
        return np.maximum(y, 0.0)
    u = np.clip(y / eps, -1.0, 1.0)
    inner = y * _KERNEL_CDF(u) - eps * _KERNEL_FIRST_MOMENT(u)
    return np.where(y >= eps, y, np.where(y <= -eps, 0.0, inner))


@dataclass(frozen=True)
class PutPayoff:
    """``notional * max(strike - x[axis], 0)``, optionally mollified."""

    axis: int
    notional: float = 1.0
    strike: float = 0.0
    eps: float = 0.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.notional * smoothed_ramp(self.strike - x[..., self.axis], self.eps)


@dataclass(frozen=True)
class TabulatedPayoff:
    """Payoff sampled on a tensor grid, multilinear inside and linearly extrapolated."""

    axes: tuple
    values: np.ndarray
    _interp: RegularGridInterpolator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        axes = tuple(_frozen(a) for a in self.axes)
        values = _frozen(self.values)
        if values.shape != tuple(len(a) for a in axes):
            raise InvalidModelError("tabulated payoff shape does not match its axes")
        if not np.all(np.isfinite(values)):
            raise InvalidModelError("tabulated payoff contains non-finite entries")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "values", values)
        interp = RegularGridInterpolator(axes, values, method="linear", bounds_error=False, fill_value=None)
        object.__setattr__(self, "_interp", interp)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self._interp(x.reshape(-1, x.shape[-1])).reshape(x.shape[:-1])


@dataclass(frozen=True)
class ScaledPayoff:
    base: Callable
    factor: float

    def __call__(self, x):
        return self.factor * self.base(x)


@dataclass(frozen=True)
class NegatedPayoff:
    base: Callable

    def __call__(self, x):
        return -self.base(x)


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class MarketModel:
    """Unscaled economy driven by ``dX = b(t, X) dt + sigma(t, X) dW``.

    Attributes
    ----------
    dim_d : int
        Brownian (and state) dimension.
    deltas : ndarray, shape (I,)
        Risk tolerances of the agents.
    drift_b, vol_sigma : callable
        ``(t, x) -> (..., d)`` and ``(t, x) -> (..., d, d)``.
    dividend_g0 : callable
        Unscaled stock dividend as a function of the terminal state.
    endowments_g : tuple of callables
        Unscaled endowment of each agent.
    x0 : ndarray, shape (d,)
    """

    dim_d: int
    deltas: np.ndarray
    drift_b: Callable
    vol_sigma: Callable
    dividend_g0: Callable
    endowments_g: tuple
    x0: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        deltas = _frozen(np.atleast_1d(self.deltas))
        x0 = _frozen(np.atleast_1d(self.x0))
        if self.dim_d < 1:
            raise InvalidModelError("dim_d must be a positive integer")
        if deltas.ndim != 1 or deltas.size == 0:
            raise InvalidModelError("deltas must be a non-empty vector")
        if not np.all(np.isfinite(deltas)) or np.any(deltas <= 0.0):
            raise InvalidModelError(f"risk tolerances must be positive, got {deltas.tolist()}")
        if len(self.endowments_g) != deltas.size:
            raise InvalidModelError(
                f"{len(self.endowments_g)} endowments supplied for {deltas.size} agents"
            )
        if x0.shape != (self.dim_d,):
            raise InvalidModelError(f"x0 must have shape ({self.dim_d},), got {x0.shape}")
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "endowments_g", tuple(self.endowments_g))

    @property
    def num_agents_I(self) -> int:
        return self.deltas.size

    @property
    def constant_coefficients(self) -> bool:
        return isinstance(self.drift_b, ConstantDrift) and isinstance(self.vol_sigma, ConstantVolatility)

    def diffusion_matrix(self, t, x) -> np.ndarray:
        s = self.vol_sigma(t, x)
        return s @ np.swapaxes(s, -1, -2)

    def payoffs(self, x) -> np.ndarray:
        """Unscaled ``(g0, g1, ..., gI)`` stacked on a trailing axis."""
        cols = [self.dividend_g0(x)] + [g(x) for g in self.endowments_g]
        return np.stack(cols, axis=-1)

    def check_payoffs_finite(self, lo, hi, n: int = 21) -> None:
        """Raise unless every payoff is finite on an ``n``-per-axis sample of the box."""
        axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        vals = self.payoffs(pts)
        if not np.all(np.isfinite(vals)):
            raise InvalidModelError("payoff is not finite on the spatial box")


def check_ellipticity(model: MarketModel, lam: float = 1e-6, samples: int = 1000,
                      seed: int = 0, lo=None, hi=None) -> float:
    """Sample ``lam |xi|^2 <= xi' A xi <= |xi|^2 / lam`` at random ``(t, x, xi)``.

    Returns the worst observed Rayleigh quotient ratio margin; raises
    :class:`InvalidModelError` on the first violation.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    d = model.dim_d
    if lo is None:
        lo = model.x0 - 5.0
    if hi is None:
        hi = model.x0 + 5.0
    t = rng.uniform(0.0, 1.0, samples)
    x = rng.uniform(np.asarray(lo, float), np.asarray(hi, float), (samples, d))
    xi = rng.standard_normal((samples, d))
    a = np.stack([model.diffusion_matrix(ti, xj[None, :])[0] for ti, xj in zip(t, x)])
    quad = np.einsum("ni,nij,nj->n", xi, a, xi)
    nrm = np.sum(xi * xi, axis=-1)
    ratio = quad / nrm
    bad = (ratio < lam) | (ratio > 1.0 / lam)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise InvalidModelError(
            f"ellipticity fails at t={t[k]:.6g}, x={x[k].tolist()}: xi'A xi/|xi|^2 = {ratio[k]:.6g}"
        )
    return float(min(ratio.min() - lam, 1.0 / lam - ratio.max()))


@dataclass(frozen=True)
class ScaledEconomy:
    """Dimensionless economy: ``alpha_i = delta_i / sum(delta)``, dividend over
    ``sum(delta)``, endowment ``i`` over ``delta_i``."""

    model: MarketModel
    alphas: np.ndarray
    sum_delta: float

    def scaled_dividend(self, x):
        return self.model.dividend_g0(x) / self.sum_delta

    def scaled_endowment(self, i: int, x):
        return self.model.endowments_g[i](x) / self.model.deltas[i]

    @property
    def scaled_endowments(self) -> tuple:
        return tuple(ScaledPayoff(g, 1.0 / d) for g, d in zip(self.model.endowments_g, self.model.deltas))

    def terminal(self, x) -> np.ndarray:
        """Scaled terminal data ``(xi, E^1, ..., E^I)`` with a trailing component axis."""
        return self.model.payoffs(x) / self.divisors

    @property
    def divisors(self) -> np.ndarray:
        return np.concatenate([[self.sum_delta], self.model.deltas])

    @property
    def num_agents(self) -> int:
        return self.alphas.size


def scale_economy(model: MarketModel) -> ScaledEconomy:
    deltas = np.asarray(model.deltas, dtype=float)
    if np.any(deltas <= 0.0):
        raise InvalidModelError("risk tolerances must be positive")
    total = float(np.sum(deltas))
    alphas = deltas / total
    return ScaledEconomy(model=model, alphas=_frozen(alphas), sum_delta=total)


# ---------------------------------------------------------------------------
# built-in economies


def make_gaussian_economy(b0: Sequence[float], b_agents, deltas, x0=None) -> MarketModel:
    """Brownian state ``X = W`` with payoffs linear in ``W_1``.

    ``b0`` and ``b_agents`` are the *scaled* payoff rows: after scaling, the
    dividend is ``b0 . x`` and agent ``i``'s endowment is ``b_agents[i] . x``.
    """
    b0 = np.atleast_1d(np.asarray(b0, dtype=float))
    b_agents = np.atleast_2d(np.asarray(b_agents, dtype=float))
    deltas = np.atleast_1d(np.asarray(deltas, dtype=float))
    d = b0.size
    if b_agents.shape[1] != d:
        raise InvalidModelError(f"agent payoff rows have dimension {b_agents.shape[1]}, expected {d}")
    if b_agents.shape[0] != deltas.size:
        raise InvalidModelError(f"{b_agents.shape[0]} payoff rows for {deltas.size} agents")
    if np.any(deltas <= 0.0):
        raise InvalidModelError("risk tolerances must be positive")
    total = float(np.sum(deltas))
    return MarketModel(
        dim_d=d,
        deltas=deltas,
        drift_b=ConstantDrift(np.zeros(d)),
        vol_sigma=ConstantVolatility(np.eye(d)),
        dividend_g0=LinearPayoff(total * b0),
        endowments_g=tuple(LinearPayoff(di * bi) for di, bi in zip(deltas, b_agents)),
        x0=np.zeros(d) if x0 is None else x0,
        name="gaussian",
    )


def make_put_option_economy(N: float, sigma_w: float, deltas, eps_payoff: float = 0.0,
                            x0=(0.0, 0.0)) -> MarketModel:
    """Production/weather economy with ``N`` puts on the weather factor.

    State ``X = (sigma_w W^1, sigma_w W^2)``; dividend ``x1 + x2``; agent 1
    holds ``N * max(-x2, 0)`` and agent 2 is short the same claim.
    """
    deltas = np.atleast_1d(np.asarray(deltas, dtype=float))
    if N < 0:
        raise InvalidModelError(f"number of puts must be non-negative, got {N}")
    if deltas.size != 2:
        raise InvalidModelError("the put-option economy has exactly two agents")
    if not sigma_w > 0.0:
        raise InvalidModelError("sigma_w must be positive")
    put = PutPayoff(axis=1, notional=float(N), eps=eps_payoff)
    return MarketModel(
        dim_d=2,
        deltas=deltas,
        drift_b=ConstantDrift(np.zeros(2)),
        vol_sigma=ConstantVolatility(sigma_w * np.eye(2)),
        dividend_g0=LinearPayoff(np.ones(2)),
        endowments_g=(put, NegatedPayoff(put)),
        x0=x0,
        name="put_option",
    )


def make_tabulated_economy(axes, g0_values, endowment_values, deltas, sigma=None, drift=None,
                           x0=None) -> MarketModel:
    """Constant-coefficient economy whose payoffs are given on a tensor grid."""
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    d = len(axes)
    sigma = np.eye(d) if sigma is None else np.atleast_2d(np.asarray(sigma, dtype=float))
    drift = np.zeros(d) if drift is None else np.asarray(drift, dtype=float)
    return MarketModel(
        dim_d=d,
        deltas=deltas,
        drift_b=ConstantDrift(drift),
        vol_sigma=ConstantVolatility(sigma),
        dividend_g0=TabulatedPayoff(axes, g0_values),
        endowments_g=tuple(TabulatedPayoff(axes, v) for v in endowment_values),
        x0=np.array([0.5 * (a[0] + a[-1]) for a in axes]) if x0 is None else x0,
        name="custom_tabulated",
    )
