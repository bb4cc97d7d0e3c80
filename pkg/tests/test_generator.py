import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from radner.generator import (
    RegularizationParams,
    StructuralConditionError,
    as_zmatrix,
    check_structural_conditions,
    f_raw,
    f_reg,
    grad_f0,
    positively_spans,
    sample_z,
    sharp_grad_bound,
    spanning_vectors,
)

ALPHAS = np.array([0.4, 0.6])
HALF = np.array([0.5, 0.5])

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
zmats = arrays(np.float64, (3, 2), elements=finite)


def test_nodal_value_of_agent_generator():
    z = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])
    f = f_raw(z, HALF)
    assert f[1] == -12.5
    assert f[0] == 0.0


@pytest.mark.parametrize("z0, sign", [((0.7, 0.0), 1.0), ((-0.7, 0.0), -1.0), ((0.0, 0.7), 0.0)])
def test_directional_factor_discontinuity(z0, sign):
    z0 = np.array(z0)
    z = np.array([z0, [2.0, 0.0], [0.0, 0.0]])
    w = HALF @ z[1:] - z[2]
    np.testing.assert_allclose(w, [1.0, 0.0])
    assert w @ z0 / np.linalg.norm(z0) == pytest.approx(sign)
    expected = 0.5 * ((z0 + w) @ z0 / np.linalg.norm(z0)) ** 2
    assert f_raw(z, HALF)[2] == pytest.approx(expected, rel=1e-14)


def test_hand_evaluated_generator():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    np.testing.assert_allclose(f_raw(z, HALF), [-2.0, 0.0, 0.0])


def test_grad_f0_examples():
    assert np.all(grad_f0(np.zeros((3, 2)), HALF) == 0.0)
    z = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    np.testing.assert_allclose(grad_f0(z, HALF), [[-2.0, 0.0], [-0.5, 0.0], [-0.5, 0.0]])


def test_grad_f0_matches_finite_differences(rng):
    h = 1e-6
    for _ in range(100):
        z = rng.normal(size=(3, 2))
        g = grad_f0(z, ALPHAS)
        fd = np.zeros_like(z)
        for idx in np.ndindex(z.shape):
            e = np.zeros_like(z)
            e[idx] = h
            fd[idx] = (f_raw(z + e, ALPHAS)[0] - f_raw(z - e, ALPHAS)[0]) / (2 * h)
        np.testing.assert_allclose(fd, g, rtol=1e-4, atol=1e-4 * np.abs(g).max())


@settings(max_examples=200, deadline=None)
@given(zmats, st.floats(0.01, 100.0))
def test_homogeneity_property(z, lam):
    f = f_raw(z, ALPHAS)
    fl = f_raw(lam * z, ALPHAS)
    scale = lam**2 * (np.abs(f).max() + (z * z).sum()) + 1e-300
    assert np.max(np.abs(fl - lam**2 * f)) <= 1e-12 * scale


@settings(max_examples=300, deadline=None)
@given(zmats)
def test_aggregate_and_lower_bounds(z):
    f = f_raw(z, ALPHAS)
    slack = 1e-10 * (1 + (z * z).sum())
    assert f[0] + ALPHAS @ f[1:] <= slack
    assert np.all(-f[1:] <= 0.5 * np.sum(z[1:] ** 2, axis=-1) + slack)
    # f0 vanishes on the nodal set and is bounded by (1 + sum alpha)|z0||z|
    assert abs(f[0]) <= 2.0 * np.linalg.norm(z[0]) * np.linalg.norm(z) * (1 + 1e-12) + slack


@settings(max_examples=200, deadline=None)
@given(zmats)
def test_agent_upper_bound(z):
    f = f_raw(z, ALPHAS)
    m = ALPHAS @ z[1:]
    for i in range(2):
        ub = 0.5 * np.sum((z[0] + m - z[i + 1]) ** 2)
        assert f[i + 1] <= ub + 1e-10 * (1 + (z * z).sum())


def test_f_reg_equals_f_raw_on_the_good_set(rng):
    p = RegularizationParams(10.0)
    for _ in range(200):
        z = rng.normal(size=(3, 2))
        z /= max(1.0, np.linalg.norm(z) / 9.0)
        if np.linalg.norm(z[0]) < 0.1:
            continue
        x = rng.uniform(-7, 7, size=2)
        np.testing.assert_array_equal(f_reg(x, z, p, ALPHAS), f_raw(z, ALPHAS))


def test_f_reg_vanishes_on_nodal_set_and_far_away():
    p = RegularizationParams(5.0)
    z = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 4.0]])
    assert np.all(f_reg(np.zeros(2), z, p, ALPHAS) == 0.0)
    z[0] = [1.0, 0.0]
    assert np.all(f_reg(np.array([10.0, 0.0]), z, p, ALPHAS) == 0.0)


def test_truncation_norm():
    p = RegularizationParams(3.0)
    z = np.arange(6.0).reshape(3, 2)
    z *= 6.0 / np.linalg.norm(z)
    assert np.linalg.norm(p.truncate(z)) == pytest.approx(3.0)
    small = z / 10.0
    np.testing.assert_array_equal(p.truncate(small), small)
    np.testing.assert_array_equal(p.truncate(np.zeros((3, 2))), 0.0)


def test_cutoff_shape():
    p = RegularizationParams(2.0)
    r = np.array([[0.0], [2.0], [3.0], [4.0], [9.0]])
    c = p.cutoff(r)
    np.testing.assert_allclose(c, [1.0, 1.0, 0.5, 0.0, 0.0])
    fine = np.linspace(0, 5, 5001)[:, None]
    assert np.max(np.abs(np.diff(p.cutoff(fine)))) < 1e-3  # continuous


def test_regularization_rejects_nonpositive_n():
    with pytest.raises(ValueError):
        RegularizationParams(0.0)


def _lipschitz_quotients(n, rng, near_nodal):
    p = RegularizationParams(n)
    q = []
    for _ in range(2000):
        z1 = rng.normal(size=(3, 2))
        if near_nodal:
            z1[0] *= 1e-3
        z2 = z1 + 1e-3 * rng.normal(size=(3, 2))
        x1 = rng.uniform(-3 * n, 3 * n, 2)
        x2 = x1 + 1e-3 * rng.normal(size=2)
        num = np.linalg.norm(f_reg(x1, z1, p, ALPHAS) - f_reg(x2, z2, p, ALPHAS))
        den = np.sqrt(np.sum((z1 - z2) ** 2) + np.sum((x1 - x2) ** 2))
        q.append(num / den)
    return np.array(q)


def test_f_reg_lipschitz_bounded_and_grows_with_n():
    q5 = _lipschitz_quotients(5.0, np.random.Generator(np.random.Philox(3)), True)
    q50 = _lipschitz_quotients(50.0, np.random.Generator(np.random.Philox(3)), True)
    assert np.all(np.isfinite(q5)) and np.all(np.isfinite(q50))
    assert q5.max() < 1e3
    assert q50.max() >= q5.max()


def test_spanning_vectors():
    v = spanning_vectors(ALPHAS)
    assert v.shape == (4, 3)
    assert positively_spans(v)
    assert not positively_spans(-np.eye(3))


def test_sample_z_contains_exact_nodal_cases():
    z = sample_z(np.random.Generator(np.random.Philox(0)), 10_000, 2, 2)
    nodal = np.all(z[:, 0, :] == 0.0, axis=-1)
    assert 500 < nodal.sum() < 1500
    scales = np.linalg.norm(z, axis=(-2, -1))
    assert scales.min() < 1e-2 and scales.max() > 1e2


def test_structural_conditions_with_sharp_bound():
    rep = check_structural_conditions(ALPHAS, 20_000, 11, M=sharp_grad_bound(ALPHAS))
    assert rep.ok
    assert all(v == 0 for v in rep.violations.values())


def test_sharp_bound_is_attained():
    # agent rows aligned with z0 push |m + 2 z0| past 2|z|
    a = ALPHAS
    z0 = np.array([1.0, 0.0])
    z = np.vstack([z0, np.outer(a / 2.0, z0)])
    g = grad_f0(z, a)
    ratio = np.linalg.norm(g[0]) / np.linalg.norm(z)
    assert ratio > 2.0
    assert ratio <= sharp_grad_bound(a) + 1e-12


def test_structural_violation_raises_with_witness():
    with pytest.raises(StructuralConditionError) as exc:
        check_structural_conditions(ALPHAS, 20_000, 11, M=0.5)
    assert exc.value.condition.startswith("grad")
    assert exc.value.witness.shape == (3, 2)


def test_as_zmatrix_validation():
    with pytest.raises(ValueError):
        as_zmatrix(np.zeros((2, 2)), 2, 2)
    with pytest.raises(ValueError):
        as_zmatrix(np.full((3, 2), np.nan), 2, 2)
