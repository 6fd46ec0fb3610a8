"""
Tests for Hermite polynomials, Wick products, diagrams and chaos projections.
"""

import math

import numpy as np
import pytest
import sympy

from gfflab.services.hermite_service import (
    HermiteError,
    HermiteOfCoordinate,
    LinearFunctional,
    SingularCovarianceError,
    alpha_tilde,
    chaos_project,
    conditional_hermite_moment,
    enumerate_diagrams,
    hermite_bound_check,
    hermite_multivariate,
    hermite_polynomial,
    hermite_univariate,
    multi_index_of,
    wick_moment,
    wick_polynomial,
    wick_product_values,
)


def _random_spd(rng, k, ridge=0.2):
    a = rng.standard_normal((k, k))
    return a @ a.T + ridge * np.eye(k)


def test_univariate_values():
    assert float(hermite_univariate(2, 2.0)) == 3.0
    assert float(hermite_univariate(3, 1.5)) == pytest.approx(1.5**3 - 3 * 1.5)


def test_multi_index_helpers():
    assert multi_index_of([0, 2, 2], 3) == (1, 0, 2)
    assert alpha_tilde((3, 1, 0)) == (2, 0, 0)


@pytest.mark.parametrize("m", range(7))
def test_wick_power_is_hermite(m):
    """:Z^m: = H_m(Z) exactly for a standard normal Z."""
    wick = wick_polynomial([[1]], [0] * m).as_expr()
    hermite, _ = hermite_polynomial([[1]], (m,))
    assert sympy.expand(wick - hermite) == 0


def test_hermite_factorizes_under_independence():
    expr, (x0, x1) = hermite_polynomial([[1, 0], [0, 1]], (2, 1))
    assert sympy.expand(expr - (x0**2 - 1) * x1) == 0


def test_exact_rational_coefficients():
    expr, symbols = hermite_polynomial([[2, 1], [1, 2]], (1, 1))
    coefficients = sympy.Poly(expr, *symbols).coeffs()
    assert all(isinstance(c, sympy.Rational) for c in coefficients)


def test_numeric_recursion_matches_symbolic():
    rng = np.random.default_rng(2)
    cov = _random_spd(rng, 3)
    x = rng.standard_normal((5, 3))
    for alpha in [(1, 0, 0), (2, 1, 0), (1, 1, 1), (0, 3, 1)]:
        expr, symbols = hermite_polynomial(cov.tolist(), alpha)
        f = sympy.lambdify(symbols, expr, "numpy")
        expected = f(*x.T)
        assert np.allclose(hermite_multivariate(cov, alpha, x), expected, rtol=1e-9, atol=1e-9)


def test_order_cap_and_singular_covariance():
    with pytest.raises(HermiteError):
        hermite_multivariate(np.eye(1), (20,), [0.0])
    with pytest.raises(SingularCovarianceError):
        hermite_multivariate([[1.0, 1.0], [1.0, 1.0]], (1, 0), [0.0, 0.0])


def test_hermite_bounds_hold():
    """The univariate and multivariate pointwise bounds have no violations."""
    uni, multi = hermite_bound_check(np.random.default_rng(4))
    assert multi.cases == 10_000
    assert uni.violations == 0
    assert multi.violations == 0, f"worst ratio {multi.worst_ratio}"


def test_diagram_counts():
    assert len(enumerate_diagrams([4, 4])) == 24
    assert len(enumerate_diagrams([2, 2, 2])) == 8
    odd = enumerate_diagrams([1, 1, 1])
    assert odd.odd_total and len(odd) == 0


def test_wick_moment_closed_form():
    """E[:X_a X_b: :X_c X_d:] = K_ac K_bd + K_ad K_bc."""
    rng = np.random.default_rng(6)
    for _ in range(20):
        K = _random_spd(rng, 4)
        expected = K[0, 2] * K[1, 3] + K[0, 3] * K[1, 2]
        assert wick_moment(K, [[0, 1], [2, 3]]) == pytest.approx(expected, rel=1e-12)
        assert wick_moment(K, [[0, 0]]) == 0.0


def test_wick_moment_matches_monte_carlo():
    rng = np.random.default_rng(8)
    K = _random_spd(rng, 4)
    samples = rng.standard_normal((400_000, 4)) @ np.linalg.cholesky(K).T
    product = wick_product_values(K, [0, 0], samples) * wick_product_values(K, [1, 2], samples)
    se = product.std() / math.sqrt(product.size)
    assert abs(product.mean() - wick_moment(K, [[0, 0], [1, 2]])) < 4 * se


def test_wick_values_match_polynomial():
    rng = np.random.default_rng(9)
    K = _random_spd(rng, 3)
    x = rng.standard_normal((10, 3))
    for indices in [(0, 1), (0, 0, 2), (1, 1, 1, 2)]:
        assert np.allclose(wick_product_values(K, indices, x), wick_polynomial(K, indices)(x))


def test_smooth_projection_linear():
    K = np.array([[2.0, 0.5], [0.5, 1.0]])
    w = np.array([1.0, -2.0])
    projection = chaos_project(K, LinearFunctional(w), 1)
    assert projection.method == "smooth"
    assert projection.variance == pytest.approx(w @ K @ w)


def test_smooth_projection_hermite():
    projection = chaos_project(np.eye(1), HermiteOfCoordinate(0, 2), 2)
    assert projection.variance == pytest.approx(2.0)
    assert chaos_project(np.eye(1), HermiteOfCoordinate(0, 2), 1).variance == 0.0


def test_regression_projection_recovers_hermite():
    """Regression on the Wick basis finds He_2(x_0) in the second chaos."""
    projection = chaos_project(
        np.eye(2), lambda x: hermite_univariate(2, x[:, 0]), 2, n=200_000, rng=np.random.default_rng(10)
    )
    assert projection.method == "regression"
    coefficients = dict(zip(projection.basis, projection.coefficients))
    assert coefficients[(0, 0)] == pytest.approx(1.0, abs=0.05)
    assert abs(coefficients[(0, 1)]) < 0.05
    assert projection.variance == pytest.approx(2.0, rel=0.1)



def test_regression_projection_is_reproducible_without_rng():
    def quadrant(x):
        return (x[:, 0] > 0).astype(float)

    first = chaos_project(np.eye(2), quadrant, 1, n=2000)
    second = chaos_project(np.eye(2), quadrant, 1, n=2000)
    assert first.method == "regression"
    assert np.array_equal(first.coefficients, second.coefficients)

def test_conditional_moment_unconditioned_case():
    """Without conditioning the moment is the Hermite norm a! sigma^{-2a}."""
    for a in range(4):
        value = conditional_hermite_moment([[2.0]], 0, (), (a,), (), (a,), [])
        assert value == pytest.approx(math.factorial(a) * 2.0 ** (-a))
    assert conditional_hermite_moment([[2.0]], 0, (), (2,), (), (1,), []) == 0.0


def test_conditional_moment_first_order():
    """E[H^{(1,0)}(x, Y) | X = x] = x / K_XX."""
    K = np.array([[1.5, 0.4], [0.4, 1.0]])
    value = conditional_hermite_moment(K, 1, (1,), (0,), (0,), (0,), [0.7])
    assert value == pytest.approx(0.7 / 1.5)


def test_conditional_moment_matches_monte_carlo():
    rng = np.random.default_rng(12)
    K = _random_spd(rng, 3, ridge=0.5)
    x = np.array([0.3])
    # Y | X = x
    mean = K[1:, :1] @ np.linalg.solve(K[:1, :1], x)
    cov = K[1:, 1:] - K[1:, :1] @ np.linalg.solve(K[:1, :1], K[:1, 1:])
    y = mean + rng.standard_normal((400_000, 2)) @ np.linalg.cholesky(cov).T
    points = np.column_stack([np.full(y.shape[0], x[0]), y])
    product = hermite_multivariate(K, (1, 1, 0), points) * hermite_multivariate(K, (0, 1, 1), points)
    se = product.std() / math.sqrt(product.size)
    exact = conditional_hermite_moment(K, 1, (1,), (1, 0), (0,), (1, 1), x)
    assert abs(product.mean() - exact) < 4 * se + 1e-9
