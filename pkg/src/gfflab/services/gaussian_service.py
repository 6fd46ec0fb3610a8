"""
Sampling and conditioning of Gaussian vectors and lattice fields.

Two samplers share one interface (``sample_many`` and ``window_covariance``):

- ExactSampler: Cholesky factor of the covariance restricted to a site
  list. Ground truth for small boxes.
- TorusSampler: the GFF on a side-L torus with the zero Fourier mode
  removed, sampled by FFT and read on a centred window. Its covariance
  is the torus Green's function, which matches G up to an O((R/L)^{d-2})
  bias.

Conditioning on pinned sites is Gaussian regression. ConditionalModel
exposes both the Schur-complement sampler and the kriging update
f + K_{.,p} K_p^{-1}(nu - f(p)), which is exact in law for any
unconditional sampler.
"""

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Protocol

import numpy as np
from scipy import linalg
from scipy.stats import multivariate_normal

from gfflab.core.config import get_settings
from gfflab.core.errors import NumericalError, UsageError
from gfflab.services.green_service import CovarianceModel, hopping_symbol
from gfflab.services.lattice_service import LatticeBox

logger = logging.getLogger(__name__)


class SamplingError(UsageError):
    """Invalid sampling request."""

    pass


class FactorizationError(NumericalError):
    """A covariance could not be factorized."""

    pass


class DegenerateConditioningError(NumericalError):
    """Pins are repeated or the conditional covariance is singular."""

    pass


@dataclass
class FieldSample:
    """
    One realization of a field on a finite site list.

    Attributes:
        coords: Site coordinates, shape (n, d)
        values: Field value per site
        provenance: Sampler kind, seed and replicate index
    """

    coords: np.ndarray
    values: np.ndarray
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.coords.shape[0],):
            raise SamplingError("field values do not match the site list")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("field sample contains non-finite values")


class FieldSampler(Protocol):
    kind: str
    coords: np.ndarray

    def sample_many(self, n: int, rng: np.random.Generator) -> np.ndarray: ...

    def window_covariance(self) -> np.ndarray: ...


def _coords_of(sites: LatticeBox | Iterable[Sequence[int]] | np.ndarray) -> np.ndarray:
    if hasattr(sites, "coords"):
        return np.asarray(sites.coords, dtype=np.int64)
    return np.asarray([tuple(s) for s in sites], dtype=np.int64)


def _cholesky(matrix: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError as e:
        raise FactorizationError(f"{what} is not positive definite") from e


class ExactSampler:
    """Exact N(0, K) sampler on a site list via a cached Cholesky factor."""

    kind = "exact"

    def __init__(self, model: CovarianceModel, sites, max_sites: int | None = None):
        self.model = model
        self.coords = _coords_of(sites)
        budget = max_sites if max_sites is not None else get_settings().exact_max_sites
        if self.coords.shape[0] > budget:
            raise SamplingError(
                f"{self.coords.shape[0]} sites exceed the dense factorization budget {budget}"
            )
        self.covariance = model.matrix_for(self.coords)
        self.factor = _cholesky(self.covariance, "covariance")

    def window_covariance(self) -> np.ndarray:
        return self.covariance

    def sample_many(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` samples as rows of an (n, sites) array."""
        z = rng.standard_normal((n, self.coords.shape[0]))
        return z @ self.factor.T


class TorusSampler:
    """
    FFT sampler of the GFF on the torus (Z/LZ)^d, read on a window.

    The spectrum is 1/(1 - phi(theta)) off the zero mode and 0 at it.
    """

    kind = "torus"

    def __init__(self, d: int, L: int, window: LatticeBox, min_margin: int = 4):
        if d < 3:
            raise SamplingError("the torus GFF sampler needs d >= 3")
        if window.d != d:
            raise SamplingError("window dimension does not match d")
        if L < min_margin * window.side:
            raise SamplingError(
                f"torus side {L} is below {min_margin} x window side {window.side}"
            )
        self.d, self.L, self.window = d, L, window
        self.coords = window.coords
        freqs = 2.0 * np.pi * np.fft.fftfreq(L)
        theta = np.stack(np.meshgrid(*([freqs] * d), indexing="ij"), axis=-1)
        gap = 1.0 - hopping_symbol(theta)
        spectrum = np.zeros_like(gap)
        nonzero = gap > 0
        spectrum[nonzero] = 1.0 / gap[nonzero]
        self.spectrum = spectrum
        self._amplitude = np.sqrt(spectrum)
        local = self.coords - np.asarray(window.origin_offset)
        self._window_index = tuple(np.mod(local[:, axis], L) for axis in range(d))

    @cached_property
    def _torus_kernel(self) -> np.ndarray:
        return np.fft.ifftn(self.spectrum).real

    def kernel(self, lags: np.ndarray) -> np.ndarray:
        """Torus covariance at lattice lags."""
        lags = np.mod(np.asarray(lags, dtype=np.int64), self.L)
        return self._torus_kernel[tuple(lags[..., axis] for axis in range(self.d))]

    def window_covariance(self) -> np.ndarray:
        return self.kernel(self.coords[:, None, :] - self.coords[None, :, :])

    def sample_torus(self, rng: np.random.Generator) -> np.ndarray:
        white = rng.standard_normal((self.L,) * self.d)
        return np.fft.ifftn(self._amplitude * np.fft.fftn(white)).real

    def sample_many(self, n: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((n, self.coords.shape[0]))
        for k in range(n):
            out[k] = self.sample_torus(rng)[self._window_index]
        return out


def make_sampler(
    model: CovarianceModel,
    window: LatticeBox,
    kind: str = "auto",
    margin: int | None = None,
) -> ExactSampler | TorusSampler:
    """
    Choose a sampler for ``window``.

    ``auto`` uses the exact sampler within the dense budget and the torus
    sampler beyond it (GFF only).
    """
    settings = get_settings()
    if kind == "auto":
        kind = "exact" if window.n_sites <= settings.exact_max_sites or model.kind != "gff" else "torus"
    if kind == "exact":
        return ExactSampler(model, window)
    if kind == "torus":
        if model.kind != "gff":
            raise SamplingError("the torus sampler only implements the GFF")
        factor = margin if margin is not None else settings.torus_margin
        return TorusSampler(model.d, factor * window.side, window)
    raise SamplingError(f"unknown sampler kind '{kind}'")


def sample_exact(
    model: CovarianceModel,
    sites,
    rng: np.random.Generator,
    seed: int | None = None,
    replicate: int | None = None,
) -> FieldSample:
    """
    Draw one exact sample of N(0, K) on ``sites``.

    Raises:
        SamplingError: Above the dense factorization budget
        FactorizationError: If K is not positive definite
    """
    sampler = ExactSampler(model, sites)
    values = sampler.sample_many(1, rng)[0]
    return FieldSample(sampler.coords, values, {"sampler": "exact", "seed": seed, "replicate": replicate})


def sample_torus_gff(
    d: int,
    L: int,
    window: LatticeBox,
    rng: np.random.Generator,
    seed: int | None = None,
    replicate: int | None = None,
) -> FieldSample:
    """Draw one torus GFF sample read on ``window`` (margin factor >= 4)."""
    sampler = TorusSampler(d, L, window)
    values = sampler.sample_many(1, rng)[0]
    return FieldSample(
        sampler.coords, values, {"sampler": "torus", "L": L, "seed": seed, "replicate": replicate}
    )


@dataclass
class ConditionalModel:
    """
    Law of a Gaussian vector given f(pins) = values.

    Attributes:
        coords: Site coordinates (or virtual indices) of the vector
        covariance: Unconditional covariance
        pin_indices: Positions of the pinned coordinates
        pin_values: Pinned values
        mean: Conditional mean (equals the pin values on pinned coordinates)
        conditional_covariance: Schur complement on free coordinates
        weights: Regression weights K_{.,p} K_p^{-1}
    """

    coords: np.ndarray
    covariance: np.ndarray
    pin_indices: np.ndarray
    pin_values: np.ndarray
    mean: np.ndarray
    conditional_covariance: np.ndarray
    weights: np.ndarray
    free_indices: np.ndarray

    @cached_property
    def _free_factor(self) -> np.ndarray:
        if self.free_indices.size == 0:
            return np.zeros((0, 0))
        return _cholesky(self.conditional_covariance, "conditional covariance")

    @property
    def pinned_density(self) -> float:
        """Density of f(pins) at the pinned values."""
        cov = self.covariance[np.ix_(self.pin_indices, self.pin_indices)]
        return float(multivariate_normal(mean=np.zeros(len(self.pin_indices)), cov=cov).pdf(self.pin_values))

    def sample_many(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact conditional samples from the Schur complement, shape (n, sites)."""
        out = np.empty((n, self.coords.shape[0]))
        out[:, self.pin_indices] = self.pin_values
        if self.free_indices.size:
            z = rng.standard_normal((n, self.free_indices.size))
            out[:, self.free_indices] = self.mean[self.free_indices] + z @ self._free_factor.T
        return out

    def sample(self, rng: np.random.Generator, **provenance: Any) -> FieldSample:
        return FieldSample(self.coords, self.sample_many(1, rng)[0], {"sampler": "conditional", **provenance})

    def krige(self, unconditional: np.ndarray) -> np.ndarray:
        """Turn unconditional samples (n, sites) into conditional ones."""
        unconditional = np.atleast_2d(unconditional)
        residual = self.pin_values[None, :] - unconditional[:, self.pin_indices]
        out = unconditional + residual @ self.weights.T
        out[:, self.pin_indices] = self.pin_values
        return out


def condition_matrix(
    covariance: np.ndarray,
    pin_indices: Sequence[int],
    pin_values: Sequence[float] | float,
    coords: np.ndarray | None = None,
) -> ConditionalModel:
    """
    Condition N(0, covariance) on coordinates ``pin_indices``.

    Raises:
        DegenerateConditioningError: On repeated pins or a singular pinned block
    """
    covariance = np.asarray(covariance, dtype=float)
    n = covariance.shape[0]
    pins = np.asarray(pin_indices, dtype=np.int64)
    if len(set(pins.tolist())) != pins.size:
        raise DegenerateConditioningError("pinned sites must be distinct")
    if pins.size and (pins.min() < 0 or pins.max() >= n):
        raise SamplingError("pin index outside the vector")
    values = np.broadcast_to(np.asarray(pin_values, dtype=float), pins.shape).copy()
    free = np.setdiff1d(np.arange(n), pins)
    if coords is None:
        coords = np.arange(n)[:, None]

    if pins.size == 0:
        return ConditionalModel(coords, covariance, pins, values, np.zeros(n), covariance.copy(),
                                np.zeros((n, 0)), free)

    pinned_block = covariance[np.ix_(pins, pins)]
    try:
        cho = linalg.cho_factor(pinned_block, lower=True)
    except linalg.LinAlgError as e:
        raise DegenerateConditioningError("pinned covariance block is singular") from e
    weights = linalg.cho_solve(cho, covariance[pins, :]).T
    mean = weights @ values
    mean[pins] = values
    cross = covariance[np.ix_(free, pins)]
    schur = covariance[np.ix_(free, free)] - cross @ linalg.cho_solve(cho, cross.T)
    schur = 0.5 * (schur + schur.T)
    model = ConditionalModel(coords, covariance, pins, values, mean, schur, weights, free)
    if free.size:
        try:
            model._free_factor
        except FactorizationError as e:
            raise DegenerateConditioningError("conditional covariance is singular") from e
    return model


def condition(
    model: CovarianceModel,
    sites,
    pins: Iterable[tuple[Sequence[int], float]],
) -> ConditionalModel:
    """
    Condition ``model`` restricted to ``sites`` on pinned values.

    Args:
        model: Covariance model
        sites: Site list or domain
        pins: (site, value) pairs; sites must be distinct members of ``sites``

    Returns:
        ConditionalModel with the regression mean and Schur complement

    Example:
        >>> cm = condition(CovarianceModel.gff(3), [(0, 0, 0), (1, 0, 0)], [((0, 0, 0), 1.0)])
        >>> round(cm.mean[1], 6)  # G(e_1)/G(0)
        0.340537
    """
    coords = _coords_of(sites)
    lookup = {tuple(int(c) for c in row): i for i, row in enumerate(coords)}
    pin_list = list(pins)
    try:
        idx = [lookup[tuple(int(c) for c in site)] for site, _ in pin_list]
    except KeyError as e:
        raise SamplingError(f"pinned site {e.args[0]} is not among the sites") from None
    covariance = model.matrix_for(coords)
    return condition_matrix(covariance, idx, [v for _, v in pin_list], coords)


def krige_update(conditional: ConditionalModel, unconditional: np.ndarray) -> np.ndarray:
    """
    Condition unconditional draws by adding the kriged pin residual.

    Exact in law whenever ``unconditional`` has the covariance the
    conditional model was built from, so it pairs with either sampler.
    """
    return conditional.krige(unconditional)


@dataclass
class InterpolationCouple:
    """Paired samples (f, f~) and the interpolation f^t = t f + sqrt(1 - t^2) f~."""

    t: float
    f: FieldSample
    f_tilde: FieldSample

    @property
    def f_t(self) -> FieldSample:
        return interpolate(self.f, self.f_tilde, self.t)


def interpolate(f: FieldSample, f_tilde: FieldSample, t: float) -> FieldSample:
    """Pointwise t f + sqrt(1 - t^2) f~ on identical site lists."""
    if not 0.0 <= t <= 1.0:
        raise SamplingError(f"interpolation parameter must lie in [0, 1], got {t}")
    if f.coords.shape != f_tilde.coords.shape or not np.array_equal(f.coords, f_tilde.coords):
        raise SamplingError("interpolated samples must share their site list")
    values = t * f.values + np.sqrt(1.0 - t * t) * f_tilde.values
    return FieldSample(f.coords, values, {"sampler": "interpolated", "t": t})


def coupled_covariance(
    model: CovarianceModel | np.ndarray,
    I: Sequence,
    J: Sequence,
    t: float,
) -> np.ndarray:
    """
    Covariance of (X_I, X^t_J) where X^t = t X + sqrt(1 - t^2) X~.

    With a ``CovarianceModel``, I and J are lists of lattice sites; with a
    covariance matrix they are row indices.

    Returns the block matrix (Sigma_II, t Sigma_IJ; t Sigma_JI, Sigma_JJ).

    Raises:
        DegenerateConditioningError: If t = 1 and I, J overlap
    """
    if not 0.0 <= t <= 1.0:
        raise SamplingError(f"coupling parameter must lie in [0, 1], got {t}")
    if isinstance(model, CovarianceModel):
        sites = sorted({tuple(int(c) for c in s) for s in [*I, *J]})
        index = {s: k for k, s in enumerate(sites)}
        cov = model.matrix_for(np.asarray(sites, dtype=np.int64))
        I = [index[tuple(int(c) for c in s)] for s in I]
        J = [index[tuple(int(c) for c in s)] for s in J]
    else:
        cov = np.asarray(model, dtype=float)
        I = list(I)
        J = list(J)
    if t >= 1.0 and set(I) & set(J):
        raise DegenerateConditioningError("the coupled covariance is singular at t = 1 on overlapping sets")
    top = np.hstack([cov[np.ix_(I, I)], t * cov[np.ix_(I, J)]])
    bottom = np.hstack([t * cov[np.ix_(J, I)], cov[np.ix_(J, J)]])
    return np.vstack([top, bottom])


def lambda_min(matrix: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(matrix)[0])


def lambda_min_chain(covariance: np.ndarray, x_idx: Sequence[int], y_idx: Sequence[int]) -> tuple[float, float, float]:
    """(lambda_min(X, Y), lambda_min(X | Y), lambda_min(X)); the chain is non-decreasing."""
    cov = np.asarray(covariance, dtype=float)
    x_idx, y_idx = list(x_idx), list(y_idx)
    joint = cov[np.ix_(x_idx + y_idx, x_idx + y_idx)]
    xx = cov[np.ix_(x_idx, x_idx)]
    xy = cov[np.ix_(x_idx, y_idx)]
    given = xx - xy @ np.linalg.solve(cov[np.ix_(y_idx, y_idx)], xy.T)
    return lambda_min(joint), lambda_min(0.5 * (given + given.T)), lambda_min(xx)


def density_bound_ratio(covariance: np.ndarray, I: Sequence[int], J: Sequence[int], t: float) -> float:
    """
    Maximum density of (X_I, X^t_J) divided by (1 - t)^{-|I cap J|/2} lambda_min^{-(|I|+|J|)/2}.

    Bounded uniformly in t and in the instance; tests fit the constant.
    """
    coupled = coupled_covariance(covariance, I, J, t)
    k = coupled.shape[0]
    sign, logdet = np.linalg.slogdet(coupled)
    if sign <= 0:
        raise DegenerateConditioningError("coupled covariance is not positive definite")
    log_max = -0.5 * k * np.log(2 * np.pi) - 0.5 * logdet
    overlap = len(set(I) & set(J))
    lam = lambda_min(np.asarray(covariance))
    log_bound = -0.5 * overlap * np.log1p(-t) - 0.5 * (len(I) + len(J)) * np.log(lam)
    return float(np.exp(log_max - log_bound))


def density_lower_bound(covariance: np.ndarray, nu: Sequence[float]) -> tuple[float, float]:
    """
    Density of N(0, covariance) at nu and the lower bound
    (2 pi lambda_max)^{-k/2} exp(-|nu|^2 / (2 lambda_min)).
    """
    cov = np.asarray(covariance, dtype=float)
    nu = np.asarray(nu, dtype=float)
    eig = np.linalg.eigvalsh(cov)
    k = cov.shape[0]
    density = float(multivariate_normal(mean=np.zeros(k), cov=cov).pdf(nu))
    bound = float((2 * np.pi * eig[-1]) ** (-0.5 * k) * np.exp(-(nu @ nu) / (2 * eig[0])))
    return density, bound
