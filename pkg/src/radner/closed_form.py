"""Analytic and quadrature oracles for special economies.

* Gaussian payoffs (linear in ``W_1``): explicit equilibrium.
* Complete-market benchmark with a Gaussian aggregate endowment.
* Exponential (Cole-Hopf) transform of the aggregate ``S + sum_k alpha_k R^k``
  in one dimension.
* Certainty equivalent of a non-hedgeable endowment in the second factor, and
  the assembled two-factor separable economy.

Scalar Gaussian expectations use probabilists' Gauss-Hermite quadrature.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from .economy import ConstantDrift, ConstantVolatility, MarketModel, scale_economy
from .equilibrium import positions

QUADRATURE_NODES = 200


class GaussianOracleError(ValueError):
    pass


class QuadratureError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# Gaussian economy


@dataclass(frozen=True)
class GaussianSpec:
    """Scaled payoff rows: dividend ``b0 . W_1``, endowments ``b_agents[i] . W_1``."""

    b0: np.ndarray
    b_agents: np.ndarray
    alphas: np.ndarray
    sum_delta: float

    def __post_init__(self):
        b0 = np.atleast_1d(np.asarray(self.b0, dtype=float))
        ba = np.atleast_2d(np.asarray(self.b_agents, dtype=float))
        if not np.linalg.norm(b0) > 0.0:
            raise GaussianOracleError("the Gaussian oracle needs a non-zero dividend row b0")
        if ba.shape[1] != b0.size:
            raise GaussianOracleError("agent rows and b0 differ in dimension")
        object.__setattr__(self, "b0", b0)
        object.__setattr__(self, "b_agents", ba)
        object.__setattr__(self, "alphas", np.asarray(self.alphas, dtype=float))

    @classmethod
    def from_vectors(cls, b0, b_agents, deltas):
        deltas = np.asarray(deltas, dtype=float)
        return cls(b0=b0, b_agents=b_agents, alphas=deltas / deltas.sum(), sum_delta=float(deltas.sum()))

    @property
    def weighted_agents(self) -> np.ndarray:
        return self.alphas @ self.b_agents

    @property
    def rates(self) -> np.ndarray:
        """Constant ``c`` with ``v(t, x) = (t - 1) c + b . x`` per component."""
        b0, m = self.b0, self.weighted_agents
        unit = b0 / np.linalg.norm(b0)
        c0 = (m + b0) @ b0
        proj = (b0 + m - self.b_agents) @ unit
        ci = -0.5 * proj**2 + 0.5 * np.sum(self.b_agents**2, axis=-1)
        return np.concatenate([[c0], ci])

    @property
    def zmatrix(self) -> np.ndarray:
        return np.vstack([self.b0[None, :], self.b_agents])


@dataclass(frozen=True)
class GaussianState:
    S: np.ndarray
    R: np.ndarray
    zeta: np.ndarray
    gammas: np.ndarray
    thetas: np.ndarray


def gaussian_solution(spec: GaussianSpec, t, x) -> GaussianState:
    """Explicit equilibrium at time ``t`` and Brownian state ``x`` (shape ``(..., d)``)."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    c = spec.rates
    S = (t - 1.0) * c[0] + x @ spec.b0
    R = (t - 1.0)[..., None] * c[1:] + x @ spec.b_agents.T
    b0, m = spec.b0, spec.weighted_agents
    theta = ((b0 + m) @ b0 - spec.b_agents @ b0) / (b0 @ b0)
    shape = x.shape[:-1]
    return GaussianState(
        S=S,
        R=R,
        zeta=np.broadcast_to(b0, shape + b0.shape),
        gammas=np.broadcast_to(spec.b_agents, shape + spec.b_agents.shape),
        thetas=np.broadcast_to(theta, shape + theta.shape),
    )


def gaussian_values(spec: GaussianSpec, t, x) -> np.ndarray:
    """``(S, R^1, ..., R^I)`` stacked on a trailing axis."""
    st = gaussian_solution(spec, t, x)
    return np.concatenate([np.asarray(st.S)[..., None], st.R], axis=-1)


def gaussian_spec_for(model: MarketModel) -> GaussianSpec:
    """Recover the scaled payoff rows of a model built by ``make_gaussian_economy``."""
    econ = scale_economy(model)
    rows = [model.dividend_g0.coef / econ.sum_delta]
    rows += [g.coef / d for g, d in zip(model.endowments_g, model.deltas)]
    return GaussianSpec(b0=rows[0], b_agents=np.vstack(rows[1:]), alphas=econ.alphas, sum_delta=econ.sum_delta)


def gaussian_premium_unscaled(spec: GaussianSpec) -> dict:
    """Unscaled expected return ``Cov(sum E~ + xi~, xi~) / sum(delta)`` and ``Var(xi~)``."""
    deltas = spec.alphas * spec.sum_delta
    xi = spec.sum_delta * spec.b0
    agg = deltas @ spec.b_agents
    return {"premium": float((agg + xi) @ xi) / spec.sum_delta, "variance": float(xi @ xi)}


def complete_benchmark_gaussian(G_vec, xi_vec, sum_delta: float, t, x):
    """Scaled complete-market price ``E^Q_t[xi] / sum(delta)``.

    ``G_vec`` and ``xi_vec`` are the unscaled coefficient rows of the aggregate
    endowment and the dividend on ``W_1``; ``x`` is ``W_t``.  Under the density
    ``exp(-G~ / sum(delta))`` the Gaussian shift gives
    ``E^Q_t[xi~] = xi_vec . W_t - (1 - t) xi_vec . G_vec / sum(delta)``.
    """
    G_vec = np.asarray(G_vec, dtype=float)
    xi_vec = np.asarray(xi_vec, dtype=float)
    x = np.asarray(x, dtype=float)
    shift = (1.0 - np.asarray(t, dtype=float)) * (xi_vec @ G_vec) / sum_delta
    return (x @ xi_vec - shift) / sum_delta


def complete_benchmark_moments(G_vec, xi_vec, sum_delta: float) -> dict:
    """Unscaled drift rate and total volatility of the complete-market price."""
    G_vec = np.asarray(G_vec, dtype=float)
    xi_vec = np.asarray(xi_vec, dtype=float)
    return {"premium": float(xi_vec @ G_vec) / sum_delta, "total_vol": float(np.linalg.norm(xi_vec))}


# ---------------------------------------------------------------------------
# Gauss-Hermite helpers


def _gh(nodes: int):
    y, w = hermegauss(nodes)
    return y, np.log(w) - 0.5 * np.log(2.0 * np.pi)


def neg_log_gaussian_mgf(payoff: Callable, mean, sd, nodes: int = QUADRATURE_NODES) -> np.ndarray:
    """``-log E[exp(-payoff(mean + sd * Y))]`` for standard normal ``Y``; vectorized over ``mean``."""
    mean = np.asarray(mean, dtype=float)
    y, logw = _gh(nodes)
    pts = mean[..., None] + sd * y
    with np.errstate(over="ignore", invalid="ignore"):
        vals = payoff(pts)
        out = -logsumexp(logw - vals, axis=-1)
    if not np.all(np.isfinite(out)):
        raise QuadratureError("quadrature overflow: payoff grows too fast for the Gaussian kernel")
    return out


def neg_log_gaussian_mgf_mc(payoff: Callable, mean: float, sd: float, n_draws: int = 1_000_000,
                            seed: int = 0) -> tuple:
    """Monte Carlo ``-log E[exp(-payoff(mean + sd * Y))]`` and its delta-method standard error.

    Fallback for payoffs with kinks, where Gauss-Hermite converges slowly.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    vals = -np.asarray(payoff(mean + sd * rng.standard_normal(n_draws)), dtype=float)
    shift = float(np.max(vals))
    w = np.exp(vals - shift)
    m = float(np.mean(w))
    if not (m > 0.0 and np.isfinite(m)):
        raise QuadratureError("Monte Carlo estimate of the exponential moment degenerated")
    se = float(np.std(w, ddof=1) / np.sqrt(n_draws)) / m
    return -(np.log(m) + shift), se


def cole_hopf_aggregate(model_1d: MarketModel, t: float, x, quadrature_nodes: int = QUADRATURE_NODES):
    """``-log E_t[exp(-G)]`` with ``G = xi + sum_k alpha_k E^k`` (scaled), 1D constant coefficients.

    This is the value of ``v0 + sum_k alpha_k v^k`` wherever the stock
    volatility does not vanish.
    """
    if model_1d.dim_d != 1:
        raise ValueError("the Cole-Hopf oracle is one-dimensional")
    if not (isinstance(model_1d.drift_b, ConstantDrift) and isinstance(model_1d.vol_sigma, ConstantVolatility)):
        raise ValueError("the Cole-Hopf oracle needs constant coefficients")
    econ = scale_economy(model_1d)
    weights = np.concatenate([[1.0], econ.alphas])

    def aggregate(y):
        return econ.terminal(y[..., None]) @ weights

    tau = 1.0 - float(t)
    b = float(model_1d.drift_b.b[0])
    s = float(model_1d.vol_sigma.sigma[0, 0])
    x = np.asarray(x, dtype=float)
    return neg_log_gaussian_mgf(aggregate, x + b * tau, s * np.sqrt(tau), quadrature_nodes)


def nonhedgeable_r2(payoff_E2: Callable, t: float, x2, quadrature_nodes: int = QUADRATURE_NODES):
    """Certainty equivalent ``-log E[exp(-E2(W^2_1)) | W^2_t = x2]``."""
    tau = 1.0 - float(t)
    x2 = np.asarray(x2, dtype=float)
    if tau <= 0.0:
        return np.asarray(payoff_E2(x2), dtype=float)
    return neg_log_gaussian_mgf(payoff_E2, x2, np.sqrt(tau), quadrature_nodes)


def central_difference(fn: Callable, x, h: float = 1e-5):
    x = np.asarray(x, dtype=float)
    return (fn(x + h) - fn(x - h)) / (2.0 * h)


# ---------------------------------------------------------------------------
# two-factor separable economy


@dataclass(frozen=True)
class SeparableSpec:
    """Hedgeable Gaussian part on ``W^1`` plus non-hedgeable endowments on ``W^2``.

    Scaled payoffs: ``xi = b0 * w1``, ``E^k = b_agents[k] * w1 + E2[k](w2)``.
    """

    b0: float
    b_agents: Sequence[float]
    E2: tuple
    alphas: np.ndarray
    quadrature_nodes: int = QUADRATURE_NODES

    def __post_init__(self):
        if self.b0 == 0.0:
            raise GaussianOracleError("the hedgeable dividend loading must be non-zero")
        object.__setattr__(self, "alphas", np.asarray(self.alphas, dtype=float))
        object.__setattr__(self, "b_agents", np.asarray(self.b_agents, dtype=float))

    @property
    def hedgeable(self) -> GaussianSpec:
        return GaussianSpec(b0=[self.b0], b_agents=self.b_agents[:, None], alphas=self.alphas, sum_delta=1.0)

    def values(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        base = gaussian_values(self.hedgeable, t, x[..., :1])
        r2 = [nonhedgeable_r2(e, t, x[..., 1], self.quadrature_nodes) for e in self.E2]
        return base + np.stack([np.zeros(x.shape[:-1])] + r2, axis=-1)

    def zmatrix(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        n = len(self.E2)
        z = np.zeros(shape + (n + 1, 2))
        z[..., 0, 0] = self.b0
        z[..., 1:, 0] = self.b_agents
        for i, e in enumerate(self.E2):
            z[..., i + 1, 1] = central_difference(
                lambda w: nonhedgeable_r2(e, t, w, self.quadrature_nodes), x[..., 1])
        return z


@dataclass(frozen=True)
class _SeparablePayoff:
    """Unscaled ``scale * (b * x1 + E2(x2))``."""

    b: float
    E2: Callable
    scale: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.scale * (self.b * x[..., 0] + self.E2(x[..., 1]))


def make_separable_economy(b0: float, b_agents, E2, deltas):
    """Model and oracle for the two-factor separable economy with ``X = W``.

    ``b0``, ``b_agents`` and the callables ``E2`` describe the *scaled* payoffs.
    """
    deltas = np.asarray(deltas, dtype=float)
    if len(E2) != deltas.size or len(b_agents) != deltas.size:
        raise ValueError("one hedgeable loading and one E2 per agent are required")
    total = float(deltas.sum())
    model = MarketModel(
        dim_d=2,
        deltas=deltas,
        drift_b=ConstantDrift(np.zeros(2)),
        vol_sigma=ConstantVolatility(np.eye(2)),
        dividend_g0=_SeparablePayoff(float(b0), lambda w: np.zeros_like(w), total),
        endowments_g=tuple(_SeparablePayoff(float(b), e, d) for b, e, d in zip(b_agents, E2, deltas)),
        x0=np.zeros(2),
        name="separable",
    )
    spec = SeparableSpec(b0=float(b0), b_agents=b_agents, E2=tuple(E2), alphas=deltas / total)
    return model, spec


# ---------------------------------------------------------------------------
# fields for the Monte Carlo validator


class GaussianField:
    """Closed-form Gaussian solution as a field: ``values(t, x)`` and ``zmatrix(t, x)``."""

    def __init__(self, spec: GaussianSpec):
        self.spec = spec

    def values(self, t, x):
        return gaussian_values(self.spec, t, x)

    def zmatrix(self, t, x):
        x = np.asarray(x, dtype=float)
        z = self.spec.zmatrix
        return np.broadcast_to(z, x.shape[:-1] + z.shape).copy()


class SeparableField:
    def __init__(self, spec: SeparableSpec):
        self.spec = spec

    def values(self, t, x):
        return self.spec.values(t, x)

    def zmatrix(self, t, x):
        return self.spec.zmatrix(t, x)


def gaussian_positions(spec: GaussianSpec) -> np.ndarray:
    theta, _ = positions(spec.b0, spec.b_agents, spec.alphas)
    return theta
