"""
Tests for continuum kernel constants and lattice kernel sums.
"""

import math

import numpy as np
import pytest

from gfflab.services.green_service import CovarianceModel, asymptotic_constant
from gfflab.services.kernel_service import (
    ExtrapolationError,
    KernelError,
    beta_constant,
    beta_reference,
    cube_autocorrelation,
    e_boundary_constant,
    e_constant,
    e_function,
    e_log_constant,
    kernel_pair_sum,
    normalization,
    richardson,
    singular_integral,
    weighted_kernel_sum,
)
from gfflab.services.lattice_service import make_box


def test_cube_autocorrelation():
    assert float(cube_autocorrelation([0.0, 0.0, 0.0])) == 8.0
    assert float(cube_autocorrelation([1.0, 3.0])) == 0.0
    np.testing.assert_allclose(cube_autocorrelation(np.array([[0.5], [-1.5]])), [1.5, 0.5])


def test_one_dimensional_constant_closed_form():
    expected = 16.0 * math.sqrt(2.0) / 3.0
    assert e_constant(1, 0.5) == pytest.approx(expected, rel=1e-10)
    assert e_constant(1, 0.5, scheme="spherical") == pytest.approx(expected, rel=1e-8)


def test_schemes_agree_in_three_dimensions():
    duffy = e_constant(3, 1.0)
    spherical = e_constant(3, 1.0, scheme="spherical")
    assert duffy == pytest.approx(spherical, rel=1e-5)


def test_zero_exponent_is_the_volume_squared():
    assert e_constant(2, 0.0) == pytest.approx(16.0, rel=1e-12)


def test_e_function_reduces_to_constant():
    assert e_function(2, 0.5, 1, [[0.0, 0.0]]) == pytest.approx(e_constant(2, 0.5), rel=1e-12)
    # two coincident shifts merge into one singularity of twice the exponent
    assert e_function(3, 1.0, 2, [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]) == pytest.approx(e_constant(3, 2.0), rel=1e-8)


def test_e_function_is_symmetric_in_the_shift():
    t = [0.5, 0.3]
    assert e_function(2, 0.5, 1, [t]) == pytest.approx(e_function(2, 0.5, 1, [[-0.5, -0.3]]), rel=1e-8)
    far = e_function(2, 0.5, 1, [[3.0, 0.0]])
    assert 0.0 < far < e_constant(2, 0.5)


def test_divergent_requests_rejected():
    with pytest.raises(KernelError):
        e_constant(3, 3.0)
    with pytest.raises(KernelError):
        e_function(3, 1.5, 2, [[0, 0, 0], [0, 0, 0]])
    with pytest.raises(KernelError):
        e_function(3, 1.0, 2, [[0, 0, 0]])
    with pytest.raises(KernelError):
        e_constant(2, 1.0, scheme="montecarlo")
    with pytest.raises(KernelError):
        e_boundary_constant(3, 2.0)


@pytest.mark.parametrize("d, area", [(2, 8.0), (3, 24.0)])
def test_boundary_constant_at_zero_exponent(d, area):
    assert e_boundary_constant(d, 0.0) == pytest.approx(area**2, rel=1e-10)


def test_singular_integral_square():
    value = singular_integral(lambda u: np.linalg.norm(u, axis=1) ** -1.0, [-1, -1], [1, 1], [((0.0, 0.0), 1.0)])
    assert value == pytest.approx(8.0 * math.log(1.0 + math.sqrt(2.0)), rel=1e-8)
    with pytest.raises(KernelError):
        singular_integral(lambda u: u[:, 0], [-1, -1], [1, 1], [((0.0, 0.0), 2.0)])


def test_log_constant_and_normalization():
    assert e_log_constant(3) == pytest.approx(32.0 * math.pi)
    assert normalization(3, 1) == (5, 0)
    assert normalization(3, 3) == (3, 1)
    assert normalization(3, 4) == (3, 0)


def test_kernel_pair_sum_matches_dense_sum():
    model = CovarianceModel.gff(3)
    box = make_box(3, 1)
    K = model.matrix_for(box.coords)
    assert kernel_pair_sum(model, 1, 2) == pytest.approx(float(np.sum(K**2)), rel=1e-10)
    assert kernel_pair_sum(CovarianceModel.iid(2), 2, 1) == pytest.approx(25.0)


def test_richardson_recovers_limit():
    R = [4, 8, 12, 16]
    values = [3.0 + 2.0 / r - 1.0 / r**2 for r in R]
    limit, residual = richardson(R, values)
    assert limit == pytest.approx(3.0, abs=1e-10)
    assert residual < 1e-10
    with pytest.raises(ExtrapolationError):
        richardson([4], [1.0])


def test_beta_constant_bookkeeping():
    result = beta_constant(3, 1, [4, 2], model=CovarianceModel.iid(3))
    assert result.R_list == [2, 4]
    assert result.raw == pytest.approx([125.0, 729.0])
    assert (result.exponent, result.log_power) == (5, 0)
    assert result.normalized == pytest.approx([125.0 / 32, 729.0 / 1024])
    assert result.log_slopes == pytest.approx([math.log(729.0 / 125.0) / math.log(2.0)])
    with pytest.raises(KernelError):
        beta_constant(3, 1, [])


def test_beta_reference():
    c_d, _ = asymptotic_constant(3)
    assert beta_reference(3, 1) == pytest.approx(c_d * e_constant(3, 1.0))
    with pytest.raises(KernelError):
        beta_reference(3, 3)


def test_weighted_kernel_sum_counts_pairs():
    iid = CovarianceModel.iid(2)
    assert weighted_kernel_sum(iid, {((0, 0),): 1.0}, 1, 1) == pytest.approx(9.0)
    # both x and x + e_1 must stay in Lambda_1: 2 x 3 positions
    assert weighted_kernel_sum(iid, {((0, 0), (1, 0)): 1.0}, 2, 1) == pytest.approx(6.0)
    assert weighted_kernel_sum(iid, {((0, 0),): 0.5}, 1, 2) == pytest.approx(25.0 * 0.25)
