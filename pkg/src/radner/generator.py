"""The equilibrium BSDE generator, its Lipschitz regularization, and
randomized checks of its structural inequalities.

Matrices ``z`` are arrays of shape ``(..., I + 1, d)``.  Row 0 is the stock
volatility slot ``z0``; rows ``1..I`` belong to the agents.  The
discontinuity set is ``{|z0| = 0}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls


class StructuralConditionError(AssertionError):
    """A sampled matrix violates one of the generator's structural inequalities."""

    def __init__(self, condition: str, witness: np.ndarray, margin: float):
        self.condition = condition
        self.witness = witness
        self.margin = margin
        super().__init__(f"condition {condition} violated by margin {margin:.3e} at z={witness.tolist()}")


def as_zmatrix(z, num_agents: int, d: int) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-2:] != (num_agents + 1, d):
        raise ValueError(f"expected trailing shape {(num_agents + 1, d)}, got {z.shape[-2:]}")
    if not np.all(np.isfinite(z)):
        raise ValueError("z has non-finite entries")
    return z


def _weighted_agent_row(z, alphas):
    return np.einsum("k,...kj->...j", np.asarray(alphas, dtype=float), z[..., 1:, :])


def f_raw(z, alphas) -> np.ndarray:
    """Generator value ``(f0, f1, ..., fI)`` with the exact ``z0 == 0`` indicator."""
    z = np.asarray(z, dtype=float)
    z0 = z[..., 0, :]
    zi = z[..., 1:, :]
    m = _weighted_agent_row(z, alphas)
    f0 = -np.einsum("...j,...j->...", m + z0, z0)

    n0 = np.sqrt(np.einsum("...j,...j->...", z0, z0))
    off = n0 != 0.0
    denom = np.where(off, n0, 1.0)
    proj = np.einsum("...kj,...j->...k", (z0 + m)[..., None, :] - zi, z0) / denom[..., None]
    fi = 0.5 * np.where(off[..., None], proj * proj, 0.0) - 0.5 * np.einsum("...kj,...kj->...k", zi, zi)
    return np.concatenate([f0[..., None], fi], axis=-1)


def grad_f0(z, alphas) -> np.ndarray:
    """Jacobian of ``f0`` with respect to ``z``: same shape as ``z``."""
    z = np.asarray(z, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    z0 = z[..., 0, :]
    m = _weighted_agent_row(z, alphas)
    rows = [-(m + 2.0 * z0)[..., None, :]]
    rows.append(-alphas[:, None] * z0[..., None, :])
    return np.concatenate(rows, axis=-2)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


@dataclass(frozen=True)
class RegularizationParams:
    """One scalar ``n`` driving truncation, the ramp near ``z0 = 0``, and the
    spatial cutoff."""

    n: float

    def __post_init__(self):
        if not self.n > 0.0:
            raise ValueError(f"regularization parameter must be positive, got {self.n}")

    def truncate(self, z):
        z = np.asarray(z, dtype=float)
        nrm = np.sqrt(np.einsum("...kj,...kj->...", z, z))
        # identity below the threshold keeps the unregularized path bit-exact
        scale = np.where(nrm > self.n, self.n / np.where(nrm > 0.0, nrm, 1.0), 1.0)
        return z * scale[..., None, None]

    def ramp(self, r):
        return np.minimum(1.0, self.n * np.asarray(r, dtype=float))

    def cutoff(self, x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(np.sum(x * x, axis=-1)) / self.n
        return 1.0 - _smoothstep(r - 1.0)


def f_reg(x, z, params: RegularizationParams, alphas) -> np.ndarray:
    """Lipschitz generator ``f(truncate(z)) * ramp(|z0|) * cutoff(x)``."""
    z = np.asarray(z, dtype=float)
    n0 = np.sqrt(np.einsum("...j,...j->...", z[..., 0, :], z[..., 0, :]))
    weight = params.ramp(n0) * params.cutoff(x)
    return f_raw(params.truncate(z), alphas) * weight[..., None]


# ---------------------------------------------------------------------------
# positively spanning set


def spanning_vectors(alphas) -> np.ndarray:
    """``-e_1, ..., -e_{I+1}`` followed by ``(1, alpha_1, ..., alpha_I)``; one per row."""
    alphas = np.asarray(alphas, dtype=float)
    k = alphas.size + 1
    return np.vstack([-np.eye(k), np.concatenate([[1.0], alphas])[None, :]])


def positively_spans(vectors, tol: float = 1e-10) -> bool:
    """True when every ``+-e_j`` is a non-negative combination of the rows."""
    vectors = np.asarray(vectors, dtype=float)
    dim = vectors.shape[1]
    for target in np.vstack([np.eye(dim), -np.eye(dim)]):
        _, resid = nnls(vectors.T, target)
        if resid > tol:
            return False
    return True


# ---------------------------------------------------------------------------
# structural inequalities


@dataclass
class StructuralReport:
    sample_count: int
    grad_bound_M: float
    violations: dict = field(default_factory=dict)
    worst_margin: dict = field(default_factory=dict)
    witnesses: dict = field(default_factory=dict)

    @property
    def total_violations(self) -> int:
        return int(sum(self.violations.values()))

    @property
    def ok(self) -> bool:
        return self.total_violations == 0


def sample_z(rng: np.random.Generator, count: int, num_agents: int, d: int,
             zero_fraction: float = 0.1) -> np.ndarray:
    """Random matrices at log-uniform scales 1e-3..1e3; a fraction has ``z0 == 0`` exactly."""
    z = rng.standard_normal((count, num_agents + 1, d))
    z *= (10.0 ** rng.uniform(-3.0, 3.0, count))[:, None, None]
    # an independent row scale exposes the anisotropic regime
    z[:, 0, :] *= (10.0 ** rng.uniform(-1.0, 1.0, count))[:, None]
    z[rng.uniform(size=count) < zero_fraction, 0, :] = 0.0
    return z


def sharp_grad_bound(alphas) -> float:
    """Smallest ``M`` with ``|(grad f0)^0| <= M |z|`` under the Frobenius norm."""
    alphas = np.asarray(alphas, dtype=float)
    return float(np.sqrt(4.0 + alphas @ alphas))


def check_structural_conditions(alphas, sample_count: int, rng_seed: int, d: int = 2,
                                M: float = 2.0, tol: float = 1e-10,
                                raise_on_violation: bool = True) -> StructuralReport:
    """Randomized verification of the generator's structural inequalities.

    Checks, per sample ``z``:

    * ``aggregate``: ``f0 + sum_i alpha_i f_i <= 0``;
    * ``lower``: ``-f_i <= |z_i|^2 / 2``;
    * ``grad_row0`` / ``grad_rows``: ``|(grad f0)^0| <= M |z|`` and
      ``|(grad f0)^i| <= M |z0|``;
    * ``homogeneity``: ``f(lam z) = lam^2 f(z)``, relative ``1e-12``.

    Inequalities are tested with slack ``tol * (1 + |z|^2)``.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be at least 1")
    alphas = np.asarray(alphas, dtype=float)
    rng = np.random.Generator(np.random.Philox(rng_seed))
    z = sample_z(rng, sample_count, alphas.size, d)
    zsq = np.sum(z * z, axis=(-2, -1))
    slack = tol * (1.0 + zsq)

    f = f_raw(z, alphas)
    g = grad_f0(z, alphas)
    norm_z = np.sqrt(zsq)
    norm_z0 = np.sqrt(np.sum(z[:, 0, :] ** 2, axis=-1))

    margins = {
        "aggregate": f[:, 0] + f[:, 1:] @ alphas - slack,
        "lower": np.max(-f[:, 1:] - 0.5 * np.sum(z[:, 1:, :] ** 2, axis=-1), axis=-1) - slack,
        "grad_row0": np.sqrt(np.sum(g[:, 0, :] ** 2, axis=-1)) - M * norm_z - slack,
        "grad_rows": np.max(np.sqrt(np.sum(g[:, 1:, :] ** 2, axis=-1)), axis=-1) - M * norm_z0 - slack,
    }
    lam = np.where(rng.uniform(size=sample_count) < 0.5, 2.0, rng.uniform(0.1, 10.0, sample_count))
    fl = f_raw(z * lam[:, None, None], alphas)
    scale = lam**2 * (np.max(np.abs(f), axis=-1) + zsq)
    margins["homogeneity"] = (np.max(np.abs(fl - lam[:, None] ** 2 * f), axis=-1)
                              - 1e-12 * np.where(scale > 0.0, scale, 1.0))

    report = StructuralReport(sample_count=sample_count, grad_bound_M=M)
    for name, marg in margins.items():
        bad = marg > 0.0
        report.violations[name] = int(np.count_nonzero(bad))
        k = int(np.argmax(marg))
        report.worst_margin[name] = float(marg[k])
        if bad[k]:
            report.witnesses[name] = z[k].copy()
    if raise_on_violation and not report.ok:
        name = next(n for n, c in report.violations.items() if c)
        raise StructuralConditionError(name, report.witnesses[name], report.worst_margin[name])
    return report
