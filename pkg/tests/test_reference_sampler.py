"""
Tests for the order-1 and order-2 reference samplers on small frequency grids.
"""

import math

import numpy as np
import pytest
from scipy import stats

from gfflab.schemas import ExperimentConfig
from gfflab.services import reference_sampler_service
from gfflab.services.reference_sampler_service import (
    ConvolutionForm,
    FrequencyGrid,
    GridResolutionError,
    ReferenceSamplerError,
    default_cutoff,
    hermite2_variance_table,
    quadratic_form_spectrum,
    sample_hermite2,
    sinc_kernel,
    unnormalized_variance,
)


def test_sinc_kernel():
    assert float(sinc_kernel(np.zeros(3))) == 1.0
    assert float(sinc_kernel(np.array([math.pi / 2, 0.0]))) == pytest.approx(2.0 / math.pi)


def test_grid_is_symmetric_and_avoids_origin():
    grid = FrequencyGrid(2, 6, default_cutoff(6))
    centres = grid.centres
    np.testing.assert_allclose(centres[grid.mirror], -centres)
    assert np.min(np.linalg.norm(centres, axis=1)) > 0.0
    assert grid.spacing == pytest.approx(2.0 * default_cutoff(6) / 6)
    assert default_cutoff(8) == pytest.approx(math.pi)


@pytest.mark.parametrize("N", [2, 5])
def test_coarse_or_odd_grids_rejected(N):
    with pytest.raises(GridResolutionError):
        sample_hermite2(3, 1.0, N, None, 10, np.random.default_rng(0))


def test_unsupported_requests_rejected():
    with pytest.raises(ReferenceSamplerError):
        sample_hermite2(3, 1.0, 6, None, 10, np.random.default_rng(0), order=3)
    with pytest.raises(ReferenceSamplerError):
        sample_hermite2(3, 1.5, 6, None, 10, np.random.default_rng(0))


def test_order_one_is_standard_gaussian():
    x = sample_hermite2(3, 1.0, 6, None, 20_000, np.random.default_rng(8), order=1)
    assert x.shape == (20_000,)
    assert abs(x.mean()) < 5 / math.sqrt(x.size)
    assert x.var() == pytest.approx(1.0, abs=0.05)
    assert stats.kstest(x, "norm").pvalue > 1e-3


def test_order_two_is_centred_with_unit_variance():
    spectrum = quadratic_form_spectrum(3, 1.0, 6, default_cutoff(6))
    # the removed diagonal makes the quadratic form traceless
    assert abs(spectrum.sum()) < 1e-8 * np.abs(spectrum).sum()
    x = sample_hermite2(3, 1.0, 6, None, 20_000, np.random.default_rng(9))
    assert abs(x.mean()) < 0.05
    assert x.var() == pytest.approx(1.0, abs=0.1)


def test_same_stream_same_samples():
    a = sample_hermite2(3, 1.0, 6, None, 50, np.random.default_rng(1))
    b = sample_hermite2(3, 1.0, 6, None, 50, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)


def test_variance_table_rows():
    rows = hermite2_variance_table([4, 6], d=3, alpha=1.0)
    assert [row["grid_N"] for row in rows] == [4, 6]
    for row in rows:
        N = row["grid_N"]
        assert row["cutoff"] == pytest.approx(default_cutoff(N))
        assert row["variance"] == pytest.approx(unnormalized_variance(3, 1.0, N))
        spectrum = quadratic_form_spectrum(3, 1.0, N, default_cutoff(N))
        assert row["excess_kurtosis"] == pytest.approx(48.0 * np.sum(spectrum**4) / row["variance"] ** 2)
        assert row["excess_kurtosis"] > 0.0


@pytest.mark.parametrize("d, N", [(2, 6), (3, 4)])
def test_axis_by_axis_form_matches_dense_matrix(d, N):
    form = ConvolutionForm(FrequencyGrid(d, N, default_cutoff(N)), 1.0 if d == 3 else 0.5)
    A = form.dense()
    np.testing.assert_allclose(A, A.T)
    g = np.random.default_rng(2).standard_normal((3, N**d))
    np.testing.assert_allclose(form.apply(g), g @ A.T, atol=1e-12)
    np.testing.assert_allclose(form.quadratic(g), np.einsum("ki,ij,kj->k", g, A, g), atol=1e-10)
    assert form.frobenius_squared() == pytest.approx(np.sum(A**2))


def test_variance_is_twice_the_squared_spectrum():
    spectrum = quadratic_form_spectrum(3, 1.0, 6, default_cutoff(6))
    assert unnormalized_variance(3, 1.0, 6) == pytest.approx(2.0 * np.sum(spectrum**2), rel=1e-10)


def test_leading_spectrum_by_lanczos(monkeypatch):
    cutoff = default_cutoff(16)
    full = quadratic_form_spectrum(1, 0.25, 16, cutoff)
    expected = np.sort(full[np.argsort(np.abs(full))[-4:]])
    monkeypatch.setattr(reference_sampler_service, "DENSE_MAX_CELLS", 8)
    leading = quadratic_form_spectrum(1, 0.25, 16, cutoff, 4)
    np.testing.assert_allclose(leading, expected, rtol=1e-6)
    with pytest.raises(ReferenceSamplerError):
        quadratic_form_spectrum(1, 0.25, 18, default_cutoff(18))


def test_large_grid_sampling_keeps_unit_variance(monkeypatch):
    monkeypatch.setattr(reference_sampler_service, "DENSE_MAX_CELLS", 16)
    x = sample_hermite2(3, 1.0, 6, None, 20_000, np.random.default_rng(3), rank=20)
    assert abs(x.mean()) < 0.05
    assert x.var() == pytest.approx(1.0, abs=0.1)
    rows = hermite2_variance_table([6], d=3, alpha=1.0, rank=20)
    assert rows[0]["spectrum_rank"] == 20
    assert 0.0 < rows[0]["leading_fraction"] <= 1.0 + 1e-9


def test_quadratic_method_matches_spectral_law():
    spectral = sample_hermite2(3, 1.0, 4, None, 20_000, np.random.default_rng(5))
    quadratic = sample_hermite2(3, 1.0, 4, None, 20_000, np.random.default_rng(6), method="quadratic")
    assert quadratic.var() == pytest.approx(1.0, abs=0.1)
    assert stats.ks_2samp(spectral, quadratic).pvalue > 1e-3
    with pytest.raises(ReferenceSamplerError):
        sample_hermite2(3, 1.0, 4, None, 10, np.random.default_rng(0), method="dense")


def test_default_reference_grid():
    cfg = ExperimentConfig()
    assert cfg.grid_N == 64
    assert cfg.hermite_grid_table[-1] == 64
