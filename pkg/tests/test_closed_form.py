import numpy as np
import pytest

from radner.closed_form import (
    GaussianOracleError,
    GaussianSpec,
    QuadratureError,
    cole_hopf_aggregate,
    complete_benchmark_gaussian,
    complete_benchmark_moments,
    gaussian_positions,
    gaussian_premium_unscaled,
    gaussian_solution,
    gaussian_values,
    make_separable_economy,
    neg_log_gaussian_mgf,
    neg_log_gaussian_mgf_mc,
    nonhedgeable_r2,
)
from radner.economy import (
    ConstantDrift,
    ConstantVolatility,
    LinearPayoff,
    MarketModel,
    PolynomialPayoff,
    make_gaussian_economy,
    smoothed_ramp,
)
from radner.generator import f_raw
from radner.pde_solver import build_grid, solve

SIGMA_W = 0.2 / np.sqrt(2.0)


def _one_d(g0, gs, deltas, b=0.0, s=1.0):
    return MarketModel(dim_d=1, deltas=deltas, drift_b=ConstantDrift([b]), vol_sigma=ConstantVolatility([[s]]),
                       dividend_g0=g0, endowments_g=tuple(gs), x0=[0.0])


def test_gaussian_hand_values():
    spec = GaussianSpec.from_vectors([1.0, 0.0], [[0.0, 1.0], [0.0, -1.0]], [1.0, 1.0])
    np.testing.assert_allclose(spec.weighted_agents, 0.0)
    st = gaussian_solution(spec, 0.0, np.zeros(2))
    assert st.S == pytest.approx(-1.0)
    x = np.array([0.3, -2.0])
    assert gaussian_solution(spec, 1.0, x).S == pytest.approx(x @ spec.b0)
    # agent rows orthogonal to b0 and no aggregate endowment: pure mean-variance positions
    np.testing.assert_allclose(gaussian_positions(spec), 1.0)


def test_gaussian_rejects_zero_dividend():
    with pytest.raises(GaussianOracleError):
        GaussianSpec.from_vectors([0.0, 0.0], [[1.0, 0.0]], [1.0])


def test_gaussian_solves_the_pde(rng):
    for _ in range(20):
        b0 = rng.normal(size=2)
        ba = rng.normal(size=(3, 2))
        spec = GaussianSpec.from_vectors(b0, ba, rng.uniform(0.1, 2.0, 3))
        # v linear in x with constant time rate c: v_t + L v + f(Z) = c + f(b) = 0
        resid = spec.rates + f_raw(spec.zmatrix, spec.alphas)
        assert np.max(np.abs(resid)) < 1e-10
        t = rng.uniform(0, 1, 100)
        x = rng.normal(size=(100, 2))
        v = gaussian_values(spec, t, x)
        np.testing.assert_allclose(v[:, 0], (t - 1) * spec.rates[0] + x @ b0, rtol=1e-13, atol=1e-13)
        assert spec.alphas @ gaussian_positions(spec) == pytest.approx(1.0, abs=1e-12)


def test_premium_plug_in():
    xi = SIGMA_W * np.ones(2)
    sd = 5 / 6
    spec = GaussianSpec(b0=xi / sd, b_agents=np.zeros((2, 2)), alphas=np.array([0.4, 0.6]), sum_delta=sd)
    out = gaussian_premium_unscaled(spec)
    assert out["variance"] == pytest.approx(0.04)
    assert out["premium"] == pytest.approx(0.048)
    # endowments replicating the dividend double the covariance
    deltas = np.array([1 / 3, 1 / 2])
    rep = GaussianSpec(b0=xi / sd, b_agents=np.vstack([xi / (2 * d) for d in deltas]),
                       alphas=deltas / sd, sum_delta=sd)
    assert gaussian_premium_unscaled(rep)["premium"] == pytest.approx(2 * 0.04 / sd)


def test_complete_benchmark_drift_is_048():
    xi = SIGMA_W * np.ones(2)
    sd = 5 / 6
    m = complete_benchmark_moments(xi, xi, sd)
    assert m["premium"] == pytest.approx(0.048, abs=1e-15)
    assert m["total_vol"] == pytest.approx(0.2)
    x = np.array([0.1, -0.2])
    s0 = complete_benchmark_gaussian(xi, xi, sd, 0.0, x)
    s1 = complete_benchmark_gaussian(xi, xi, sd, 1.0, x)
    assert sd * (s1 - s0) == pytest.approx(0.048)
    assert s1 == pytest.approx(xi @ x / sd)


def test_complete_benchmark_no_risk_adjustment_when_orthogonal():
    xi = np.array([1.0, 0.0])
    G = np.array([0.0, 2.0])
    x = np.array([0.4, 0.7])
    assert complete_benchmark_gaussian(G, xi, 2.0, 0.3, x) == pytest.approx(0.4 / 2.0)


def test_complete_benchmark_against_monte_carlo():
    rng = np.random.Generator(np.random.Philox(5))
    xi = SIGMA_W * np.ones(2)
    G = xi + np.array([0.05, -0.02])
    sd = 5 / 6
    w = rng.standard_normal((1_000_000, 2))
    dens = np.exp(-(w @ G) / sd)
    num = dens * (w @ xi)
    est = num.mean() / dens.mean()
    # delta-method standard error of a ratio estimator
    r = (num - est * dens) / dens.mean()
    se = r.std() / np.sqrt(len(r))
    exact = sd * complete_benchmark_gaussian(G, xi, sd, 0.0, np.zeros(2))
    assert abs(est - exact) < 3 * se


def test_complete_benchmark_matches_gaussian_premium(rng):
    for _ in range(10):
        deltas = rng.uniform(0.2, 2.0, 2)
        sd = deltas.sum()
        b0 = rng.normal(size=2)
        ba = rng.normal(size=(2, 2))
        spec = GaussianSpec.from_vectors(b0, ba, deltas)
        xi = sd * b0
        G = xi + deltas @ ba
        drift_com = complete_benchmark_moments(G, xi, sd)["premium"]
        assert drift_com == pytest.approx(gaussian_premium_unscaled(spec)["premium"], rel=1e-12)


def test_cole_hopf_linear_and_constant():
    m = make_gaussian_economy([0.8], [[0.5], [-0.1]], [1.0, 3.0])
    c = 0.8 + 0.25 * 0.5 + 0.75 * (-0.1)
    x = np.linspace(-2, 2, 9)
    for t in (0.0, 0.4, 1.0):
        np.testing.assert_allclose(cole_hopf_aggregate(m, t, x), c * x - c * c * (1 - t) / 2, atol=1e-12)
    k = _one_d(LinearPayoff([0.0], 2.0), [LinearPayoff([0.0], -1.0)], [2.0])
    np.testing.assert_allclose(cole_hopf_aggregate(k, 0.3, x), 1.0 - 0.5, atol=1e-13)


def test_cole_hopf_quadratic_against_monte_carlo():
    m = _one_d(PolynomialPayoff([(1.0, (2,))]), [LinearPayoff([0.0])], [1.0])
    val = cole_hopf_aggregate(m, 0.0, np.array([0.3]))[0]
    # exact: -log E[exp(-(0.3 + W)^2)] = 0.5 log 3 + 0.09 / 3
    assert val == pytest.approx(0.5 * np.log(3.0) + 0.09 / 3.0, rel=1e-12)
    est, se = neg_log_gaussian_mgf_mc(lambda y: y * y, 0.3, 1.0, 1_000_000, seed=2)
    assert abs(est - val) < 3 * se


def test_cole_hopf_preconditions(gaussian_model):
    with pytest.raises(ValueError):
        cole_hopf_aggregate(gaussian_model, 0.0, np.zeros(1))
    m = MarketModel(dim_d=1, deltas=[1.0], drift_b=lambda t, x: 0 * x, vol_sigma=ConstantVolatility([[1.0]]),
                    dividend_g0=LinearPayoff([1.0]), endowments_g=(LinearPayoff([0.0]),), x0=[0.0])
    with pytest.raises(ValueError):
        cole_hopf_aggregate(m, 0.0, np.zeros(1))


def test_quadrature_overflow():
    with np.errstate(over="ignore"):
        with pytest.raises(QuadratureError):
            neg_log_gaussian_mgf(lambda y: -np.exp(y * y), np.zeros(1), 1.0)


def test_nonhedgeable_r2_cases():
    x2 = np.linspace(-1, 1, 5)
    for t in (0.0, 0.5):
        np.testing.assert_allclose(nonhedgeable_r2(lambda w: 0.7 * w, t, x2), 0.7 * x2 - 0.49 * (1 - t) / 2,
                                   atol=1e-12)
        np.testing.assert_allclose(nonhedgeable_r2(lambda w: 0.0 * w, t, x2), 0.0, atol=1e-14)
    e = lambda w: smoothed_ramp(-w, 0.1)  # noqa: E731
    np.testing.assert_array_equal(nonhedgeable_r2(e, 1.0, x2), e(x2))


def test_quadrature_matches_monte_carlo_on_random_payoffs():
    rng = np.random.Generator(np.random.Philox(9))
    for k in range(10):
        a, b, c, d = rng.uniform(-1, 1, 4)
        mean, sd = rng.uniform(-1, 1), rng.uniform(0.2, 1.0)

        def payoff(y, a=a, b=b, c=c, d=d):
            return a * np.sin(2 * b * y) + abs(c) * smoothed_ramp(-y, 0.05) + d * y

        q = neg_log_gaussian_mgf(payoff, np.array([mean]), sd)[0]
        est, se = neg_log_gaussian_mgf_mc(payoff, mean, sd, 1_000_000, seed=100 + k)
        assert abs(est - q) < 3 * se + 1e-6


def _separable():
    E2 = [lambda w: 0.5 * smoothed_ramp(-w, 0.2), lambda w: 0.3 * np.sin(w)]
    return make_separable_economy(1.0, [0.5, -0.2], E2, [1 / 3, 1 / 2])


def test_separable_oracle_structure():
    model, spec = _separable()
    x = np.array([[0.2, -0.4], [-1.0, 0.9]])
    z = spec.zmatrix(0.3, x)
    assert np.all(z[:, 0, 1] == 0.0)
    v = spec.values(0.3, x)
    hed = gaussian_values(spec.hedgeable, 0.3, x[:, :1])
    r2 = nonhedgeable_r2(spec.E2[0], 0.3, x[:, 1])
    np.testing.assert_allclose(v[:, 1], hed[:, 1] + r2, rtol=1e-14)


def test_separable_oracle_matches_pde():
    model, spec = _separable()
    g = build_grid([(-5, 5), (-5, 5)], 81, 200, model.x0)
    sol = solve(model, g, 50.0)
    mask = g.inner_mask()
    err = np.abs(sol.slice_at(0.0) - spec.values(0.0, g.nodes))[mask]
    assert err.max() < 1e-2
