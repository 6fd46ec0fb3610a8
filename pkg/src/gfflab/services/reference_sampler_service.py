"""
Reference samplers for limit laws of cluster-count fluctuations.

The order-2 Hermite law is the double Wiener-Ito integral

    Z' = c * integral S_0(l_1 + l_2) W(dl_1) W(dl_2) / (|l_1| |l_2|)^{(d - alpha)/2},

with S_0(l) = prod sin(l_i) / l_i and W complex Hermitian white noise. It is
discretized on a symmetric frequency grid that avoids the origin; the
diagonal l_2 = +-l_1 is removed. The discrete double integral is a real
quadratic form in independent standard normals. Folding the Hermitian
symmetry into the mirror permutation turns it into h^d g^T A g with

    A = W (C - I - M) W,   C_ij = S_0(l_i - l_j),   M_{i,-i} = S_0(2 l_i),

W the diagonal spectral weight and g standard normal. C is a Kronecker
product of one Toeplitz matrix per axis, so A is applied without being
formed. Small grids are sampled from the full spectrum of A; large grids
from its leading eigenvalues (Lanczos) plus a Gaussian remainder carrying
the exact leftover variance. The order-1 analogue is the single integral,
which is Gaussian.
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache, reduce

import numpy as np
from scipy import linalg
from scipy.sparse import linalg as sparse_linalg

from gfflab.core.config import get_settings
from gfflab.core.errors import NumericalError, UsageError
from gfflab.core.rng import replicate_stream

logger = logging.getLogger(__name__)

DENSE_MAX_CELLS = 4096
LEADING_RANK = 64
SAMPLE_BLOCK_CELLS = 2**22
METHODS = ("auto", "spectral", "quadratic")


class ReferenceSamplerError(UsageError):
    """Invalid reference-sampler request."""

    pass


class GridResolutionError(NumericalError):
    """The frequency grid is too coarse for a stable variance normalization."""

    pass


def sinc_kernel(lam: np.ndarray) -> np.ndarray:
    """
    S_0(l) = prod sin(l_i) / l_i, the Fourier transform of 2^{-d} 1_{[-1,1]^d}.

    >>> float(sinc_kernel(np.zeros(3)))
    1.0
    """
    lam = np.asarray(lam, dtype=float)
    return np.prod(np.sinc(lam / np.pi), axis=-1)


@dataclass(frozen=True)
class FrequencyGrid:
    """Cell centres h (k - N/2 + 1/2), k = 0..N-1 per axis, and the index of each mirrored cell."""

    d: int
    N: int
    cutoff: float

    @property
    def spacing(self) -> float:
        return 2.0 * self.cutoff / self.N

    @property
    def cells(self) -> int:
        return self.N**self.d

    @property
    def axis(self) -> np.ndarray:
        return self.spacing * (np.arange(self.N) - self.N / 2 + 0.5)

    @property
    def centres(self) -> np.ndarray:
        grid = np.meshgrid(*([self.axis] * self.d), indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    @property
    def mirror(self) -> np.ndarray:
        index = np.arange(self.cells).reshape((self.N,) * self.d)
        return index[(slice(None, None, -1),) * self.d].ravel()


def _apply_axes(x: np.ndarray, matrix: np.ndarray, d: int) -> np.ndarray:
    """Apply a symmetric N x N matrix along each of the last d axes of x."""
    for axis in range(-d, 0):
        x = np.moveaxis(np.moveaxis(x, axis, -1) @ matrix, -1, axis)
    return x


class ConvolutionForm:
    """The matrix A of the discretized double integral, applied axis by axis."""

    def __init__(self, grid: FrequencyGrid, alpha: float):
        self.grid = grid
        self.alpha = alpha
        self.shape = (grid.N,) * grid.d

    @cached_property
    def toeplitz(self) -> np.ndarray:
        axis = self.grid.axis
        return np.sinc((axis[:, None] - axis[None, :]) / np.pi)

    @cached_property
    def weight(self) -> np.ndarray:
        norm = np.linalg.norm(self.grid.centres, axis=1)
        return (norm ** ((self.alpha - self.grid.d) / 2.0)).reshape(self.shape)

    @cached_property
    def mirror_kernel(self) -> np.ndarray:
        """S_0(2 l) on the grid."""
        line = np.sinc(2.0 * self.grid.axis / np.pi)
        return reduce(np.multiply.outer, [line] * self.grid.d)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """A v for v of shape (..., cells)."""
        v = np.asarray(v, dtype=float)
        d = self.grid.d
        x = v.reshape(v.shape[:-1] + self.shape)
        w = self.weight
        flipped = np.flip(x, axis=tuple(range(-d, 0)))
        out = w * _apply_axes(w * x, self.toeplitz, d) - w**2 * (x + self.mirror_kernel * flipped)
        return out.reshape(v.shape)

    def quadratic(self, g: np.ndarray) -> np.ndarray:
        """g^T A g for each row of g."""
        return np.einsum("...i,...i->...", g, self.apply(g))

    def frobenius_squared(self) -> float:
        w2 = self.weight**2
        full = float(np.sum(w2 * _apply_axes(w2, self.toeplitz**2, self.grid.d)))
        return full - float(np.sum(w2**2 * (1.0 + self.mirror_kernel**2)))

    def dense(self) -> np.ndarray:
        w = self.weight.ravel()
        A = w[:, None] * reduce(np.kron, [self.toeplitz] * self.grid.d) * w[None, :]
        index = np.arange(self.grid.cells)
        A[index, index] = 0.0
        A[index, self.grid.mirror] = 0.0
        return A


def default_cutoff(N: int) -> float:
    return math.pi * N / 8.0


def _check(d: int, alpha: float, N: int, order: int) -> None:
    if order not in (1, 2):
        raise ReferenceSamplerError(f"only orders 1 and 2 are supported, got {order}")
    if order == 2 and not 2 * alpha < d:
        raise ReferenceSamplerError(f"the order-2 law needs 2 alpha < d; got alpha={alpha}, d={d}")
    if N < 4 or N % 2:
        raise GridResolutionError(f"grid size must be even and at least 4, got {N}")


@lru_cache(maxsize=16)
def quadratic_form_spectrum(d: int, alpha: float, N: int, cutoff: float, rank: int | None = None) -> np.ndarray:
    """
    Eigenvalues of the real quadratic form of the discretized double integral, ascending.

    Without ``rank`` the full spectrum is returned; this needs a grid of at
    most DENSE_MAX_CELLS cells. With ``rank`` only the ``rank`` eigenvalues of
    largest magnitude are returned, by Lanczos iteration on larger grids.

    Raises:
        ReferenceSamplerError: If the full spectrum of a large grid is requested
        GridResolutionError: If the Lanczos iteration does not converge
    """
    grid = FrequencyGrid(d, N, cutoff)
    form = ConvolutionForm(grid, alpha)
    volume = grid.spacing**d
    if grid.cells <= DENSE_MAX_CELLS:
        values = linalg.eigvalsh(form.dense())
        if rank is not None and rank < values.size:
            values = np.sort(values[np.argsort(np.abs(values))[-rank:]])
        return volume * values
    if rank is None:
        raise ReferenceSamplerError(
            f"the full spectrum needs at most {DENSE_MAX_CELLS} cells, the grid has {grid.cells}"
        )
    operator = sparse_linalg.LinearOperator(
        (grid.cells, grid.cells), matvec=lambda v: form.apply(np.ravel(v)), dtype=float
    )
    # fixed start vector; it has components in both mirror sectors
    start = replicate_stream(0, d, N).standard_normal(grid.cells)
    try:
        values = sparse_linalg.eigsh(operator, k=rank, which="LM", v0=start, return_eigenvectors=False)
    except sparse_linalg.ArpackError as e:
        raise GridResolutionError(f"Lanczos iteration failed on a grid of size {N}: {e}") from e
    logger.debug("Leading %d eigenvalues of the N=%d form computed", rank, N)
    return volume * np.sort(values)


def _linear_weights(d: int, alpha: float, N: int, cutoff: float) -> np.ndarray:
    """Coefficients of the real Gaussians in the discretized single integral."""
    grid = FrequencyGrid(d, N, cutoff)
    lam = grid.centres
    coef = sinc_kernel(lam) * np.linalg.norm(lam, axis=1) ** ((alpha - d) / 2.0)
    return math.sqrt(grid.spacing**d) * coef


def unnormalized_variance(d: int, alpha: float, N: int, cutoff: float | None = None, order: int = 2) -> float:
    """Variance of the discretized integral before normalization."""
    _check(d, alpha, N, order)
    cutoff = default_cutoff(N) if cutoff is None else cutoff
    if order == 1:
        return float(np.sum(_linear_weights(d, alpha, N, cutoff) ** 2))
    grid = FrequencyGrid(d, N, cutoff)
    return 2.0 * grid.spacing ** (2 * d) * ConvolutionForm(grid, alpha).frobenius_squared()


def _block(cells: int) -> int:
    return max(1, min(4 * get_settings().batch_size, SAMPLE_BLOCK_CELLS // cells))


def sample_hermite2(
    d: int,
    alpha: float,
    grid_N: int,
    cutoff: float | None,
    n: int,
    rng: np.random.Generator,
    order: int = 2,
    method: str = "auto",
    rank: int = LEADING_RANK,
) -> np.ndarray:
    """
    Unit-variance samples of the order-2 Hermite law (or its Gaussian order-1 analogue).

    Args:
        d: Dimension
        alpha: Decay exponent of the covariance (d - 2 for the GFF)
        grid_N: Cells per axis of the frequency grid (even)
        cutoff: Frequency cutoff L; the grid covers [-L, L]^d
        n: Number of samples
        rng: Random stream
        order: 2 for the Hermite law, 1 for the Gaussian analogue
        method: "spectral" draws sum e_k (y_k^2 - 1) from the full spectrum when
            the grid is small, else from the ``rank`` leading eigenvalues plus a
            Gaussian remainder; "quadratic" evaluates g^T A g per sample;
            "auto" is "spectral"
        rank: Leading eigenvalues kept on large grids

    Raises:
        ReferenceSamplerError: If 2 alpha >= d for order 2, or on an unknown method
        GridResolutionError: If the grid is too coarse to normalize
    """
    _check(d, alpha, grid_N, order)
    if method not in METHODS:
        raise ReferenceSamplerError(f"unknown sampling method '{method}'")
    cutoff = default_cutoff(grid_N) if cutoff is None else cutoff
    variance = unnormalized_variance(d, alpha, grid_N, cutoff, order)
    if not np.isfinite(variance) or variance <= 0.0:
        raise GridResolutionError(f"variance normalization failed on a grid of size {grid_N}")
    scale = 1.0 / math.sqrt(variance)
    grid = FrequencyGrid(d, grid_N, cutoff)
    out = np.empty(n)
    if order == 1:
        # a linear functional of independent Gaussians
        weights = _linear_weights(d, alpha, grid_N, cutoff) * scale
        block = _block(grid.cells)
        for start in range(0, n, block):
            size = min(block, n - start)
            out[start : start + size] = rng.standard_normal((size, grid.cells)) @ weights
        return out

    if method == "quadratic":
        form = ConvolutionForm(grid, alpha)
        factor = grid.spacing**d * scale
        block = _block(grid.cells)
        for start in range(0, n, block):
            size = min(block, n - start)
            out[start : start + size] = factor * form.quadratic(rng.standard_normal((size, grid.cells)))
        return out

    full = grid.cells <= DENSE_MAX_CELLS
    spectrum = quadratic_form_spectrum(d, alpha, grid_N, cutoff, None if full else rank) * scale
    remainder = 0.0 if full else max(0.0, 1.0 - 2.0 * float(np.sum(spectrum**2)))
    block = _block(spectrum.size)
    for start in range(0, n, block):
        size = min(block, n - start)
        out[start : start + size] = (rng.standard_normal((size, spectrum.size)) ** 2 - 1.0) @ spectrum
        if remainder:
            out[start : start + size] += math.sqrt(remainder) * rng.standard_normal(size)
    return out


def hermite2_variance_table(
    grid_Ns: list[int],
    d: int = 3,
    alpha: float = 1.0,
    cutoff_scale: float | None = None,
    rank: int = LEADING_RANK,
) -> list[dict[str, float]]:
    """
    Unnormalized variance of the discretized double integral for each grid size.

    The excess kurtosis 48 sum e^4 / Var^2 comes from the full spectrum on
    small grids and from the leading ``rank`` eigenvalues on large ones, where
    it is a lower bound; ``leading_fraction`` is their share of the variance.
    """
    rows = []
    for N in grid_Ns:
        cutoff = default_cutoff(N) if cutoff_scale is None else cutoff_scale * N
        variance = unnormalized_variance(d, alpha, N, cutoff)
        full = N**d <= DENSE_MAX_CELLS
        spectrum = quadratic_form_spectrum(d, alpha, N, cutoff, None if full else rank)
        rows.append(
            {
                "grid_N": N,
                "cutoff": cutoff,
                "variance": variance,
                "excess_kurtosis": float(48.0 * np.sum(spectrum**4) / variance**2),
                "spectrum_rank": int(spectrum.size),
                "leading_fraction": float(2.0 * np.sum(spectrum**2) / variance),
            }
        )
        logger.info("Hermite-2 grid N=%d: unnormalized variance %.6g", N, variance)
    return rows
