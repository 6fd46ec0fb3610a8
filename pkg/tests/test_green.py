"""
Tests for the lattice Green's function and covariance models.
"""

import math

import numpy as np
import pytest

from gfflab.core.errors import NumericalError
from gfflab.services.green_service import (
    CovarianceError,
    CovarianceModel,
    GreenFunctionError,
    GreenFunctionService,
    asymptotic_constant,
    covariance_matrix,
    green_function,
    harmonic_solver_oracle,
    iid_floor,
    spectral_density,
)


def test_green_at_origin_d3():
    """G(0) in d = 3 is Watson's value 1.516386..."""
    assert abs(green_function(3, (0, 0, 0)) - 1.516386059) < 1e-5


def test_green_harmonicity():
    """G(x) = delta_{x,0} + (1/2d) sum of G over the neighbours of x."""
    d = 3
    for x in [(0, 0, 0), (1, 0, 0), (1, 1, 0), (2, 1, 1), (3, 0, 2)]:
        total = 0.0
        for axis in range(d):
            for step in (-1, 1):
                y = list(x)
                y[axis] += step
                total += green_function(d, y)
        delta = 1.0 if x == (0, 0, 0) else 0.0
        residual = green_function(d, x) - delta - total / (2 * d)
        assert abs(residual) < 1e-8, f"harmonicity fails at {x}: {residual}"


def test_green_symmetries():
    """G depends on |x_i| up to permutation."""
    assert green_function(3, (2, -1, 0)) == green_function(3, (0, 1, 2))


def test_green_decreasing_along_axis():
    values = [green_function(3, (r, 0, 0)) for r in range(6)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_asymptotic_constant_d3():
    c_d, alpha = asymptotic_constant(3)
    assert alpha == 1
    assert abs(c_d - 3.0 / (2.0 * math.pi)) < 1e-12


def test_asymptotic_matches_quadrature_far_away():
    """The expansion used beyond the switch radius agrees with the quadrature."""
    service = GreenFunctionService(3, switch_radius=100)
    for x in [(12, 0, 0), (10, 6, 4)]:
        exact = service.value(x)
        approx = float(service.asymptotic(np.array(x)))
        assert abs(approx - exact) / exact < 1e-3


def test_evaluate_vectorized():
    service = GreenFunctionService(3)
    lags = np.array([[0, 0, 0], [1, 0, 0], [0, -1, 0]])
    values = service.evaluate(lags)
    assert values.shape == (3,)
    assert values[1] == values[2]
    assert abs(values[0] - values[1] - 1.0) < 1e-9



def test_quadrature_refines_to_the_requested_tolerance():
    service = GreenFunctionService(3, nodes_per_panel=2, max_nodes_per_panel=256)
    coarse = service.value((0, 0, 0), tol=1e-2)
    assert abs(coarse - 1.516386059151978) / 1.516386059151978 < 1e-2
    fine = service.value((0, 0, 0), tol=1e-11)
    assert fine == pytest.approx(1.516386059151978, rel=1e-9)
    with pytest.raises(NumericalError):
        GreenFunctionService(3, nodes_per_panel=2, max_nodes_per_panel=2).value((0, 0, 0))
    with pytest.raises(GreenFunctionError):
        green_function(3, (0, 0, 0), tol=1e-14)

def test_recurrent_dimensions_rejected():
    with pytest.raises(GreenFunctionError):
        green_function(2, (0, 0))
    with pytest.raises(GreenFunctionError):
        CovarianceModel.gff(2)


def test_iid_floor_is_one_half():
    assert abs(iid_floor(3) - 0.5) < 1e-12


def test_spectral_density_pole():
    with pytest.raises(GreenFunctionError):
        spectral_density(3, [0.0, 0.0, 0.0])


def test_covariance_matrix_is_spd_and_symmetric():
    sites = [(0, 0, 0), (1, 0, 0), (0, 2, 0), (1, 1, 1)]
    K = covariance_matrix(CovarianceModel.gff(3), sites)
    assert np.allclose(K, K.T)
    assert np.linalg.eigvalsh(K)[0] >= iid_floor(3) - 1e-9


def test_covariance_matrix_rejects_duplicates():
    with pytest.raises(GreenFunctionError):
        covariance_matrix(CovarianceModel.iid(2), [(0, 0), (0, 0)])


def test_explicit_model_checks_definiteness():
    with pytest.raises(CovarianceError):
        CovarianceModel.explicit(np.array([[1.0, 2.0], [2.0, 1.0]]), [(0,), (1,)])
    model = CovarianceModel.explicit(np.array([[1.0, 0.5], [0.5, 1.0]]), [(0,), (1,)])
    assert np.allclose(model.matrix_for(np.array([[1], [0]])), [[1.0, 0.5], [0.5, 1.0]])


def test_harmonic_oracle_below_full_space_value():
    """The Dirichlet Green's function on a finite box sits just below G(0)."""
    g = harmonic_solver_oracle(3, 2)
    centre = g[tuple(s // 2 for s in g.shape)]
    G0 = green_function(3, (0, 0, 0))
    assert G0 - 0.15 < centre < G0
