import numpy as np
import pytest

from radner.economy import (
    ConstantDrift,
    ConstantVolatility,
    InvalidModelError,
    LinearPayoff,
    MarketModel,
    PolynomialPayoff,
    PutPayoff,
    TabulatedPayoff,
    check_ellipticity,
    make_gaussian_economy,
    make_put_option_economy,
    make_tabulated_economy,
    scale_economy,
    smoothed_ramp,
)
from radner.closed_form import GaussianOracleError, gaussian_spec_for

from conftest import DELTAS, SIGMA_W


@pytest.mark.parametrize("deltas, alphas", [
    ((1 / 3, 1 / 2), (0.4, 0.6)),
    ((1.0,), (1.0,)),
    ((2.0, 2.0, 2.0), (1 / 3, 1 / 3, 1 / 3)),
])
def test_scaling_weights(deltas, alphas):
    m = make_gaussian_economy([1.0], [[0.0]] * len(deltas), deltas)
    econ = scale_economy(m)
    np.testing.assert_allclose(econ.alphas, alphas, rtol=1e-14)
    assert abs(econ.alphas.sum() - 1.0) < 1e-14
    assert econ.sum_delta == pytest.approx(sum(deltas), rel=1e-15)


def test_nonpositive_delta_rejected():
    with pytest.raises(InvalidModelError):
        make_gaussian_economy([1.0], [[0.0], [0.0]], [1.0, 0.0])
    with pytest.raises(InvalidModelError):
        make_put_option_economy(2, SIGMA_W, [-1.0, 1.0])


def test_unscaling_round_trip(rng):
    m = make_put_option_economy(2, SIGMA_W, DELTAS)
    econ = scale_economy(m)
    x = rng.normal(scale=0.3, size=(500, 2))
    np.testing.assert_allclose(econ.scaled_dividend(x) * econ.sum_delta, m.dividend_g0(x), rtol=1e-12)
    for i, (g, d) in enumerate(zip(m.endowments_g, m.deltas)):
        np.testing.assert_allclose(econ.scaled_endowment(i, x) * d, g(x), rtol=1e-12, atol=1e-300)


def test_gaussian_economy_examples():
    m = make_gaussian_economy([1.0, 0.0], [[1.0, 0.0], [-1.0, 0.0]], [1.0, 1.0])
    econ = scale_economy(m)
    assert econ.scaled_dividend(np.array([2.0, 3.0])) == pytest.approx(2.0)
    # aggregate G = xi + sum alpha_k E^k = x1 when sum alpha_k b_k = 0
    x = np.array([[0.7, -1.3], [2.0, 5.0]])
    G = econ.terminal(x) @ np.concatenate([[1.0], econ.alphas])
    np.testing.assert_allclose(G, x[:, 0])


def test_zero_dividend_constructs_but_oracle_refuses():
    m = make_gaussian_economy([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], [1.0, 1.0])
    with pytest.raises(GaussianOracleError):
        gaussian_spec_for(m)


def test_gaussian_dimension_mismatch():
    with pytest.raises(InvalidModelError):
        make_gaussian_economy([1.0, 0.0], [[1.0, 0.0, 0.0]], [1.0])
    with pytest.raises(InvalidModelError):
        make_gaussian_economy([1.0, 0.0], [[1.0, 0.0]], [1.0, 2.0])


def test_put_economy_payoffs():
    m = make_put_option_economy(2, SIGMA_W, DELTAS)
    g = m.payoffs(np.array([0.0, -0.1]))
    assert g[1] == pytest.approx(0.2) and g[2] == pytest.approx(-0.2)
    for N in (0, 1, 2, 5):
        g = make_put_option_economy(N, SIGMA_W, DELTAS).payoffs(np.array([0.4, 0.3]))
        assert g[1] == 0.0 and g[2] == 0.0


def test_put_economy_zero_net_supply(rng):
    m = make_put_option_economy(3, SIGMA_W, DELTAS)
    x = rng.normal(scale=0.5, size=(1000, 2))
    g = m.payoffs(x)
    np.testing.assert_array_equal(g[:, 1] + g[:, 2], 0.0)


def test_put_economy_dividend_volatility():
    m = make_put_option_economy(2, SIGMA_W, DELTAS)
    xi = m.dividend_g0.coef @ m.vol_sigma.sigma
    assert xi @ xi == pytest.approx(0.04, rel=1e-14)
    assert np.linalg.norm(xi) == pytest.approx(0.2, rel=1e-14)


def test_put_economy_rejects_bad_inputs():
    with pytest.raises(InvalidModelError):
        make_put_option_economy(-1, SIGMA_W, DELTAS)
    with pytest.raises(InvalidModelError):
        make_put_option_economy(1, SIGMA_W, [1.0, 1.0, 1.0])


def test_ellipticity_probe_rejects_degenerate_sigma():
    m = MarketModel(dim_d=2, deltas=[1.0], drift_b=ConstantDrift([0.0, 0.0]),
                    vol_sigma=ConstantVolatility(np.diag([1.0, 0.0])),
                    dividend_g0=LinearPayoff([1.0, 0.0]), endowments_g=(LinearPayoff([0.0, 0.0]),), x0=[0.0, 0.0])
    with pytest.raises(InvalidModelError):
        check_ellipticity(m)
    assert check_ellipticity(make_put_option_economy(1, SIGMA_W, DELTAS), lam=1e-6) > 0.0


def test_model_validation():
    with pytest.raises(InvalidModelError):
        MarketModel(dim_d=1, deltas=[1.0, 1.0], drift_b=ConstantDrift([0.0]), vol_sigma=ConstantVolatility([[1.0]]),
                    dividend_g0=LinearPayoff([1.0]), endowments_g=(LinearPayoff([0.0]),), x0=[0.0])
    with pytest.raises(InvalidModelError):
        MarketModel(dim_d=1, deltas=[1.0], drift_b=ConstantDrift([0.0]), vol_sigma=ConstantVolatility([[1.0]]),
                    dividend_g0=LinearPayoff([1.0]), endowments_g=(LinearPayoff([0.0]),), x0=[0.0, 1.0])


def test_payoff_finiteness_check():
    bad = MarketModel(dim_d=1, deltas=[1.0], drift_b=ConstantDrift([0.0]), vol_sigma=ConstantVolatility([[1.0]]),
                      dividend_g0=lambda x: 1.0 / x[..., 0], endowments_g=(LinearPayoff([0.0]),), x0=[0.5])
    with np.errstate(divide="ignore"):
        with pytest.raises(InvalidModelError):
            bad.check_payoffs_finite([-1.0], [1.0])


def test_models_are_immutable():
    m = make_put_option_economy(2, SIGMA_W, DELTAS)
    with pytest.raises(Exception):
        m.deltas[0] = 5.0
    with pytest.raises(Exception):
        m.x0 = np.zeros(2)


def test_smoothed_ramp():
    y = np.linspace(-2, 2, 401)
    np.testing.assert_array_equal(smoothed_ramp(y, 0.0), np.maximum(y, 0.0))
    s = smoothed_ramp(y, 0.5)
    far = np.abs(y) >= 0.5
    np.testing.assert_allclose(s[far], np.maximum(y, 0.0)[far], atol=1e-15)
    assert np.all(np.diff(s) >= -1e-15)
    # convolution of a convex function with a symmetric kernel lies above it
    assert np.all(s >= np.maximum(y, 0.0) - 1e-15)
    # second derivative is bounded (C^2 mollifier) near the kink
    assert np.max(np.abs(np.diff(s, 2))) / (y[1] - y[0]) ** 2 < 10.0


def test_put_payoff_mollified_matches_kink_away_from_strike():
    p = PutPayoff(axis=1, notional=2.0, eps=0.05)
    x = np.array([[0.0, -0.3], [0.0, 0.3]])
    np.testing.assert_allclose(p(x), [0.6, 0.0])


def test_polynomial_payoff():
    p = PolynomialPayoff([(2.0, (1, 0)), (3.0, (1, 2))])
    assert p(np.array([2.0, -1.0])) == pytest.approx(2 * 2 + 3 * 2 * 1)


def test_tabulated_economy_interpolates_and_extrapolates():
    axes = (np.linspace(-1, 1, 5), np.linspace(-1, 1, 7))
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    lin = X @ np.array([1.0, -2.0]) + 0.5
    m = make_tabulated_economy(axes, lin, [lin * 0.0, 2.0 * lin], [1.0, 1.0])
    pts = np.array([[0.13, -0.77], [1.5, 2.0]])
    np.testing.assert_allclose(m.dividend_g0(pts), pts @ np.array([1.0, -2.0]) + 0.5, atol=1e-12)
    with pytest.raises(InvalidModelError):
        TabulatedPayoff(axes, lin[:-1])
