import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rhbsde.regression import RegressionBasis, SingularRegressionError, StepFit, conditional_expectation

rng = np.random.default_rng(0)
X1 = rng.normal(size=(500, 1))
X2 = rng.normal(size=(500, 2))


def test_polynomial_basis_reproduces_polynomials():
    y = 1 - 2 * X1[:, 0] + 0.5 * X1[:, 0] ** 3
    np.testing.assert_allclose(conditional_expectation(X1, y, RegressionBasis(degree=3)), y, atol=1e-9)
    y2 = X2[:, 0] * X2[:, 1] + X2[:, 1] ** 2
    np.testing.assert_allclose(conditional_expectation(X2, y2, RegressionBasis(degree=2)), y2, atol=1e-9)


def test_piecewise_linear_reproduces_affine_functions():
    y = 3 * X1[:, 0] - 1
    fit = conditional_expectation(X1, y, RegressionBasis("piecewise_linear", bins=8))
    np.testing.assert_allclose(fit, y, atol=1e-9)


def test_indicator_bins_give_bin_averages():
    basis = RegressionBasis("indicator_bins", bins=4, domain_box=((-2.0,), (2.0,)))
    y = rng.normal(size=500)
    fb = basis.fit(X1)
    fit = fb.fitted(y)[1]
    cells = fb.cell_index(X1)
    for c in np.unique(cells):
        np.testing.assert_allclose(fit[cells == c], y[cells == c].mean())


def test_singular_design_raises():
    with pytest.raises(SingularRegressionError):
        RegressionBasis(degree=8, max_condition=10.0).fit(X1)


def test_too_few_samples_fall_back_to_constant():
    fb = RegressionBasis(degree=3).fit(X1[:5])
    assert fb.constant_only and fb.n_functions == 1


def test_prediction_survives_release():
    fb = RegressionBasis(degree=2).fit(X1)
    coef = fb.solve(X1[:, 0] ** 2)
    fb.release()
    f = StepFit(fb, coef)
    np.testing.assert_allclose(f(np.array([[0.5], [-1.0]])), [0.25, 1.0], atol=1e-9)


def test_rejects_unknown_kind_and_multidim_hats():
    with pytest.raises(ValueError):
        RegressionBasis("splines")
    with pytest.raises(ValueError):
        RegressionBasis("piecewise_linear").fit(X2)


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(0, 5), seed=st.integers(0, 1000))
def test_indicator_regression_is_order_preserving(shift, seed):
    r = np.random.default_rng(seed)
    y = r.normal(size=500)
    y2 = y + shift * r.random(500)
    basis = RegressionBasis("indicator_bins", bins=6)
    assert np.all(conditional_expectation(X1, y2, basis) >= conditional_expectation(X1, y, basis) - 1e-12)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), kind=st.sampled_from(["polynomial", "piecewise_linear"]))
def test_regression_is_linear_in_targets(a, b, kind):
    basis = RegressionBasis(kind, degree=3, bins=10)
    u, v = np.sin(X1[:, 0]), np.abs(X1[:, 0])
    lhs = conditional_expectation(X1, a * u + b * v, basis)
    rhs = a * conditional_expectation(X1, u, basis) + b * conditional_expectation(X1, v, basis)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)
