import numpy as np
import pytest

from radner.economy import (
    ConstantDrift,
    ConstantVolatility,
    LinearPayoff,
    MarketModel,
    PolynomialPayoff,
    ScaledPayoff,
    make_gaussian_economy,
    make_put_option_economy,
)
from radner.pde_solver import build_grid, default_box, solve

GAUSS_B0 = [1.0, 0.0]
GAUSS_B = [[0.5, 0.3], [-0.2, 0.1]]
DELTAS = [1.0 / 3.0, 0.5]
SIGMA_W = 0.2 / np.sqrt(2.0)

# lines printed by the acceptance module, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(':'))):
            terminalreporter.write_line(line)


class _Sine:
    def __init__(self, amp):
        self.amp = amp

    def __call__(self, x):
        return self.amp * np.sin(np.asarray(x)[..., 0])


def cole_hopf_model():
    """1D constant-coefficient economy: linear dividend, quadratic and sine endowments."""
    d = np.array(DELTAS)
    return MarketModel(
        dim_d=1,
        deltas=d,
        drift_b=ConstantDrift([0.0]),
        vol_sigma=ConstantVolatility([[1.0]]),
        dividend_g0=LinearPayoff([d.sum()]),
        endowments_g=(PolynomialPayoff([(0.2 * d[0], (2,))]), ScaledPayoff(_Sine(0.3), d[1])),
        x0=[0.0],
    )


@pytest.fixture(scope="session")
def gaussian_model():
    return make_gaussian_economy(GAUSS_B0, GAUSS_B, DELTAS)


@pytest.fixture(scope="session")
def gaussian_grid(gaussian_model):
    return build_grid(default_box(gaussian_model), 161, 200, gaussian_model.x0)


@pytest.fixture(scope="session")
def gaussian_solution(gaussian_model, gaussian_grid):
    return solve(gaussian_model, gaussian_grid, 50.0)


@pytest.fixture(scope="session")
def put_model():
    return make_put_option_economy(2, SIGMA_W, DELTAS)


@pytest.fixture(scope="session")
def put_grid(put_model):
    return build_grid(default_box(put_model), 161, 200, put_model.x0)


@pytest.fixture(scope="session")
def put_solution(put_model, put_grid):
    return solve(put_model, put_grid, 50.0)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))
