"""
Tests for field samplers, conditioning and interpolation couplings.
"""

import numpy as np
import pytest

from gfflab.core.rng import replicate_stream
from gfflab.services.gaussian_service import (
    DegenerateConditioningError,
    ExactSampler,
    SamplingError,
    TorusSampler,
    condition,
    condition_matrix,
    coupled_covariance,
    density_bound_ratio,
    density_lower_bound,
    krige_update,
    lambda_min_chain,
    make_sampler,
)
from gfflab.services.green_service import CovarianceModel, green_function
from gfflab.services.lattice_service import make_box


def test_exact_sampler_covariance():
    """Empirical covariance of exact samples matches K."""
    model = CovarianceModel.gff(3)
    sites = [(0, 0, 0), (1, 0, 0), (2, 0, 0)]
    sampler = ExactSampler(model, sites)
    samples = sampler.sample_many(40000, replicate_stream(1, 0))
    empirical = np.cov(samples, rowvar=False)
    assert np.max(np.abs(empirical - sampler.window_covariance())) < 0.05


def test_exact_sampler_is_deterministic_per_stream():
    sampler = ExactSampler(CovarianceModel.iid(2), make_box(2, 1))
    a = sampler.sample_many(3, replicate_stream(5, 2))
    b = sampler.sample_many(3, replicate_stream(5, 2))
    assert np.array_equal(a, b)


def test_exact_sampler_budget():
    with pytest.raises(SamplingError):
        ExactSampler(CovarianceModel.iid(3), make_box(3, 2), max_sites=10)


def test_torus_sampler_covariance_close_to_green():
    """The torus covariance on a side-3 window is within O(1/L) of G."""
    window = make_box(3, 1)
    sampler = TorusSampler(3, 24, window)
    K = sampler.window_covariance()
    assert abs(K[0, 0] - green_function(3, (0, 0, 0))) < 0.1
    assert np.allclose(K, K.T)


def test_torus_sampler_margin_enforced():
    with pytest.raises(SamplingError):
        TorusSampler(3, 8, make_box(3, 1))


def test_make_sampler_auto_choice():
    model = CovarianceModel.gff(3)
    assert make_sampler(model, make_box(3, 1)).kind == "exact"
    assert make_sampler(model, make_box(3, 1), kind="torus", margin=4).kind == "torus"
    with pytest.raises(SamplingError):
        make_sampler(CovarianceModel.iid(3), make_box(3, 1), kind="torus")


def test_condition_regression_mean():
    """E[f(e_1) | f(0) = 1] = G(e_1) / G(0)."""
    cm = condition(CovarianceModel.gff(3), [(0, 0, 0), (1, 0, 0)], [((0, 0, 0), 1.0)])
    expected = green_function(3, (1, 0, 0)) / green_function(3, (0, 0, 0))
    assert abs(cm.mean[1] - expected) < 1e-12
    assert cm.mean[0] == 1.0


def test_conditional_samples_hold_pins():
    cm = condition(CovarianceModel.gff(3), make_box(3, 1), [((0, 0, 0), 0.7), ((1, 0, 0), -0.2)])
    samples = cm.sample_many(50, replicate_stream(3, 0))
    assert np.all(samples[:, cm.pin_indices[0]] == 0.7)
    assert np.all(samples[:, cm.pin_indices[1]] == -0.2)


def test_kriging_matches_schur_law():
    """Kriged unconditional samples have the conditional mean and covariance."""
    box = make_box(2, 1)
    model = CovarianceModel.explicit(
        np.eye(9) + 0.3 * np.ones((9, 9)), [tuple(int(c) for c in row) for row in box.coords]
    )
    cm = condition(model, box, [((0, 0), 1.5)])
    raw = ExactSampler(model, box).sample_many(40000, replicate_stream(9, 0))
    kriged = krige_update(cm, raw)
    assert np.max(np.abs(kriged.mean(axis=0) - cm.mean)) < 0.03
    free = cm.free_indices
    empirical = np.cov(kriged[:, free], rowvar=False)
    assert np.max(np.abs(empirical - cm.conditional_covariance)) < 0.05


def test_repeated_pins_rejected():
    with pytest.raises(DegenerateConditioningError):
        condition_matrix(np.eye(3), [0, 0], [1.0, 1.0])


def test_pinned_density_standard_normal():
    cm = condition_matrix(np.eye(2), [0], [0.0])
    assert abs(cm.pinned_density - 1.0 / np.sqrt(2 * np.pi)) < 1e-12


def test_coupled_covariance_blocks():
    K = np.array([[2.0, 0.5], [0.5, 1.0]])
    coupled = coupled_covariance(K, [0], [0, 1], 0.0)
    assert coupled[0, 1] == 0.0 and coupled[0, 2] == 0.0
    coupled = coupled_covariance(K, [0], [0, 1], 0.5)
    assert coupled[0, 1] == 1.0
    with pytest.raises(DegenerateConditioningError):
        coupled_covariance(K, [0], [0], 1.0)


def test_coupled_covariance_from_model_and_sites():
    model = CovarianceModel.gff(3)
    o, e1 = (0, 0, 0), (1, 0, 0)
    coupled = coupled_covariance(model, [o], [o, e1], 0.5)
    assert coupled.shape == (3, 3)
    assert coupled[0, 0] == pytest.approx(green_function(3, o))
    assert coupled[0, 1] == pytest.approx(0.5 * green_function(3, o))
    assert coupled[0, 2] == pytest.approx(0.5 * green_function(3, e1))
    assert coupled[1, 2] == pytest.approx(green_function(3, e1))
    with pytest.raises(DegenerateConditioningError):
        coupled_covariance(model, [o], [o], 1.0)


def test_lambda_min_chain_non_decreasing():
    rng = np.random.default_rng(0)
    for _ in range(20):
        A = rng.standard_normal((5, 5))
        K = A @ A.T + 0.1 * np.eye(5)
        joint, given, marginal = lambda_min_chain(K, [0, 1], [2, 3, 4])
        assert joint <= given + 1e-12 <= marginal + 2e-12


def test_density_bounds():
    rng = np.random.default_rng(1)
    for _ in range(20):
        A = rng.standard_normal((3, 3))
        K = A @ A.T + 0.2 * np.eye(3)
        density, bound = density_lower_bound(K, rng.standard_normal(3))
        assert density >= bound


def test_density_bound_ratio_stays_bounded_as_t_approaches_one():
    """The (1 - t)^{-1/2} blow-up of the overlap is captured by the bound."""
    K = np.array([[1.0, 0.3, 0.1], [0.3, 1.0, 0.3], [0.1, 0.3, 1.0]])
    near = density_bound_ratio(K, [0, 1], [1, 2], 0.9)
    nearer = density_bound_ratio(K, [0, 1], [1, 2], 0.999)
    assert 0.0 < nearer < 5.0 * near
