"""
Tests for pivotal intensities and the chaos decomposition.

Exact orthant intensities on small rectangles are the oracle for the Monte
Carlo estimators. Models are iid or a short-range explicit covariance so
the dense work stays tiny.
"""

import math

import numpy as np
import pytest
from scipy import stats

from gfflab.services.chaos_service import (
    ChaosError,
    IntensityTable,
    WindowTooSmallError,
    _offset_classes,
    build_intensity_table,
    canonical_shape,
    chaos_component,
    chaos_component_variance,
    depinning_check,
    diameter,
    finite_difference_intensity,
    halfspace_pivotal_intensity,
    joint_pivotal_intensity,
    mu_derivative,
    offset_radius,
    orthant_functional_moments,
    orthant_pivotal_intensity,
    pinned_arm_probability,
    pivotal_intensity,
    stationary_pivotal_intensity,
    tail_nodes,
    tail_variance,
    truncated_pivotal_intensity,
)
from gfflab.services.green_service import CovarianceModel
from gfflab.services.lattice_service import rectangle_domain


def _square():
    return rectangle_domain((0, 0), (2, 2))


def _short_range(domain):
    """I + 0.2 A on the grid graph; positive definite since the grid degree is at most 4."""
    coords = domain.coords
    dist = np.abs(coords[:, None, :] - coords[None, :, :]).sum(axis=-1)
    matrix = np.eye(domain.n_sites) + 0.2 * (dist == 1)
    return CovarianceModel.explicit(matrix, [tuple(int(c) for c in row) for row in coords])


def test_orthant_intensity_matches_monte_carlo():
    domain = _square()
    model = CovarianceModel.iid(2)
    exact = orthant_pivotal_intensity(model, domain, 0.5, [(1, 1)])
    estimate = pivotal_intensity(model, domain, 0.5, [(1, 1)], 20_000, np.random.default_rng(3))
    assert estimate.target == "finite"
    assert abs(estimate.estimate - exact) < 5 * estimate.stderr + 1e-3


def test_orthant_intensity_matches_finite_difference():
    domain = _square()
    model = _short_range(domain)
    for points in ([(1, 1)], [(1, 1), (1, 2)]):
        exact = orthant_pivotal_intensity(model, domain, 0.3, points)
        difference = finite_difference_intensity(model, domain, 0.3, points, h=0.05)
        assert difference == pytest.approx(exact, rel=2e-2, abs=2e-3)


def test_smoothed_moments_are_a_distribution():
    domain = _square()
    moments = orthant_functional_moments(CovarianceModel.iid(2), domain, 0.0)
    assert moments.mean >= 1.0
    assert moments.variance >= 0.0
    assert moments.second_moment == pytest.approx(moments.variance + moments.mean**2)
    assert set(moments.relevant_sites) <= set(range(domain.n_sites))


def test_orthant_rejects_large_domains():
    domain = rectangle_domain((0, 0), (3, 3))
    with pytest.raises(ChaosError):
        orthant_functional_moments(CovarianceModel.iid(2), domain, 0.0)


def test_joint_intensity_factorizes_at_zero_coupling():
    domain = _square()
    model = CovarianceModel.iid(2)
    single = orthant_pivotal_intensity(model, domain, 0.5, [(1, 1)])
    joint = joint_pivotal_intensity(model, domain, 0.5, [(1, 1)], [(1, 1)], 0.0, 20_000, np.random.default_rng(5))
    assert joint.target == "joint"
    assert abs(joint.estimate - single**2) < 5 * joint.stderr + 1e-3


@pytest.mark.parametrize("t", [-0.1, 1.0, 1.5])
def test_joint_intensity_rejects_bad_coupling(t):
    with pytest.raises(ChaosError):
        joint_pivotal_intensity(CovarianceModel.iid(2), _square(), 0.0, [(1, 1)], [(1, 1)], t, 10, np.random.default_rng(0))


def test_first_component_variance_is_quadratic_form():
    domain = _square()
    model = _short_range(domain)
    table = build_intensity_table(model, domain, 0.3, 1, method="orthant")
    P = np.zeros(domain.n_sites)
    for (i,), p in table.entries.items():
        P[i] = p
    K = model.matrix_for(domain.coords)
    assert chaos_component_variance(table) == pytest.approx(P @ K @ P, rel=1e-10)


def test_leading_components_do_not_exceed_total_variance():
    domain = _square()
    model = _short_range(domain)
    direct = orthant_functional_moments(model, domain, 0.3).variance
    partial = sum(
        chaos_component_variance(build_intensity_table(model, domain, 0.3, m, method="orthant")) for m in (1, 2)
    )
    assert 0.0 < partial <= direct + 1e-3


def test_second_component_by_hand():
    domain = rectangle_domain((0, 0), (1, 0))
    K = np.array([[1.0, 0.3], [0.3, 1.0]])
    table = IntensityTable(domain, 2, 0.0, K, {(0, 1): 0.4, (0, 0): 0.2})
    v = np.array([0.7, -1.2])
    expected = 0.5 * (2 * 0.4 * (v[0] * v[1] - K[0, 1]) + 0.2 * (v[0] ** 2 - K[0, 0]))
    assert chaos_component(domain, 0.0, 2, table, v) == pytest.approx(expected)
    batch = chaos_component(domain, 0.0, 2, table, np.stack([v, -v]))
    assert batch.shape == (2,)
    assert batch[1] == pytest.approx(expected)


def test_chaos_component_rejects_mismatched_table():
    domain = rectangle_domain((0, 0), (1, 0))
    table = IntensityTable(domain, 1, 0.0, np.eye(2), {(0,): 1.0})
    with pytest.raises(ChaosError):
        chaos_component(domain, 0.0, 2, table, np.zeros(2))
    with pytest.raises(ChaosError):
        chaos_component(domain, 0.0, 1, table, np.zeros(3))


def test_canonical_shape_and_stationary_table():
    assert canonical_shape([(2, 1), (1, 1)]) == ((0, 0), (1, 0))
    assert diameter([(0, 0), (3, -1)]) == 3
    domain = rectangle_domain((0, 0), (2, 0))
    table = IntensityTable.from_stationary(
        domain, 2, 0.0, np.eye(3), {((0, 0), (1, 0)): 0.5, ((0, 0), (0, 0)): -0.1}, cutoff=1
    )
    assert table.value([1, 0]) == 0.5
    assert table.value([2, 2]) == -0.1
    assert table.value([0, 2]) == 0.0
    assert table.method == "stationary"


def test_tail_nodes_integrate_the_weight():
    s, w = tail_nodes(1, 8)
    assert np.all((s >= 0) & (s < 1))
    # integral of (1 - s)^{-1/2} over [0, 1]
    assert float(np.sum(w / np.sqrt(1 - s))) == pytest.approx(2.0, rel=1e-10)
    s2, w2 = tail_nodes(2, 8)
    # integral of (1 - s) (1 - s)^{-1/2} ds = 2/3
    assert float(np.sum(w2 / np.sqrt(1 - s2))) == pytest.approx(2.0 / 3.0, rel=1e-10)


@pytest.mark.slow
def test_first_order_tail_is_the_total_variance():
    domain = _square()
    model = CovarianceModel.iid(2)
    direct = orthant_functional_moments(model, domain, 0.5).variance
    tail = tail_variance(model, domain, 0.5, 1, 4000, np.random.default_rng(11), nodes=8)
    assert tail.order == 1
    assert tail.pairs == 5
    assert abs(tail.value - direct) < 5 * tail.stderr + 0.02


def test_tail_variance_rejects_order_zero():
    with pytest.raises(ChaosError):
        tail_variance(CovarianceModel.iid(2), _square(), 0.0, 0, 10, np.random.default_rng(0))


def test_stationary_intensity_diagnostics():
    estimate = stationary_pivotal_intensity(
        CovarianceModel.iid(2), 0.5, [(3, 3)], 2, 2000, np.random.default_rng(2)
    )
    assert estimate.target == "stationary"
    assert estimate.points == ((0, 0),)
    assert estimate.sampler == "exact"
    assert 0.0 <= estimate.diagnostics["uncertified_fraction"] <= 1.0
    assert "window_sensitivity" in estimate.diagnostics


def test_stationary_intensity_needs_room():
    with pytest.raises(WindowTooSmallError):
        stationary_pivotal_intensity(CovarianceModel.iid(2), 0.0, [(0, 0), (4, 0)], 2, 10, np.random.default_rng(0))


def test_truncated_intensity_vanishes_outside_support():
    estimate = truncated_pivotal_intensity(
        CovarianceModel.iid(2), 0.0, [(0, 0), (5, 0)], 1, 4, 100, np.random.default_rng(0)
    )
    assert estimate.estimate == 0.0
    assert estimate.budget == 0
    with pytest.raises(ChaosError):
        truncated_pivotal_intensity(CovarianceModel.iid(2), 0.0, [(0, 0)], -1, 4, 10, np.random.default_rng(0))


def test_halfspace_intensity_window():
    estimate = halfspace_pivotal_intensity(CovarianceModel.iid(2), 0.5, 1, 1, 500, np.random.default_rng(4))
    assert estimate.points == ((1, 0),)
    assert estimate.window["height"] == 1
    assert math.isfinite(estimate.estimate)
    with pytest.raises(ChaosError):
        halfspace_pivotal_intensity(CovarianceModel.iid(2), 0.5, -1, 1, 10, np.random.default_rng(0))
    with pytest.raises(WindowTooSmallError):
        halfspace_pivotal_intensity(CovarianceModel.iid(2), 0.5, 0, 0, 10, np.random.default_rng(0))


def test_offset_classes_cover_every_offset():
    classes = _offset_classes(1, 2, 1)
    assert classes == [(((0,), (0,)), 1, 0), (((0,), (1,)), 2, 2)]
    assert sum(weight for _, weight, _ in _offset_classes(2, 2, 1)) == 9


def test_mu_derivative_order_range():
    with pytest.raises(ChaosError):
        mu_derivative(CovarianceModel.iid(2), 0.0, 4, 2, 10, np.random.default_rng(0))


def test_mu_derivative_offsets_follow_the_window():
    assert offset_radius(4) == 2
    assert offset_radius(1) == 1
    result = mu_derivative(CovarianceModel.iid(1), 0.0, 2, 4, 20, np.random.default_rng(1))
    assert result.radius == 2
    assert result.terms == len(_offset_classes(1, 2, 2))
    pinned = mu_derivative(CovarianceModel.iid(1), 0.0, 2, 4, 20, np.random.default_rng(1), radius=1)
    assert pinned.radius == 1


def test_pinned_arm_window_check():
    with pytest.raises(WindowTooSmallError):
        pinned_arm_probability(CovarianceModel.iid(2), 0.0, [(1, 0)], 3, 4, 10, np.random.default_rng(0))


def test_depinning_independent_pair():
    result = depinning_check(np.eye(2), 1, [(1, 0.0)], 0.0)
    assert result.unpinned == pytest.approx(0.25, abs=1e-6)
    assert result.pinned == pytest.approx(0.5 * stats.norm.pdf(0.0), abs=1e-6)
    assert result.lambda_min == pytest.approx(1.0)
    bound = 0.25 * math.sqrt(math.log(4.0))
    assert result.ratio == pytest.approx(result.pinned / bound, rel=1e-5)
    assert result.ratio < 1.0


def test_depinning_requires_pinned_coordinates():
    with pytest.raises(ChaosError):
        depinning_check(np.eye(2), 2, [(1, 0.0), (1, 0.0)], 0.0)
