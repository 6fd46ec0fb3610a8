"""
Pivotal intensities and the chaos expansion of the cluster count.

Every Monte Carlo intensity uses the regression form of the pivotal
intensity: the field is sampled conditionally on f(ybar) = nu(ybar), the
discrete derivative d_ybar Xi is multiplied by a Hermite factor in |ybar|
variables (only when points repeat), and the average is scaled by the exact
pinned density. Sign convention: P(nu; y) = (-1)^m d^m/dnu^m E[Xi(f - nu)].

Small domains also get an exact route through orthant probabilities, which
serves as the oracle for the Monte Carlo estimators.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations_with_replacement, permutations, product
from typing import Any

import numpy as np
from scipy import linalg, special, stats

from gfflab.core.config import get_settings
from gfflab.core.errors import NumericalError, UsageError
from gfflab.core.parallel import map_replicates
from gfflab.core.rng import job_seed, replicate_stream
from gfflab.services.cluster_service import (
    ClusterCountTable,
    arm_event,
    discrete_derivative_batch,
    stabilisation_certified,
)
from gfflab.services.gaussian_service import (
    TorusSampler,
    condition_matrix,
    lambda_min,
    make_sampler,
)
from gfflab.services.green_service import CovarianceModel
from gfflab.services.hermite_service import hermite_multivariate, wick_product_values
from gfflab.services.lattice_service import (
    LatticeBox,
    Site,
    _DomainGeometry,
    make_box,
    rectangle_domain,
    sup_norm,
)

logger = logging.getLogger(__name__)

ORTHANT_MAX_SITES = 12
CDF_TOLERANCE = 1e-8
MAX_MU_ORDER = 3


class ChaosError(UsageError):
    """Invalid chaos or pivotal-intensity request."""

    pass


class WindowTooSmallError(ChaosError):
    """The observation window cannot hold the points at the required distance."""

    pass


class QuadratureError(NumericalError):
    """The tail-variance quadrature grid is unusable."""

    pass


@dataclass
class PivotalEstimate:
    """
    One pivotal-intensity estimate.

    Attributes:
        target: "finite", "stationary", "halfspace", "truncated", "joint",
            "orthant" or "pinned-arm"
        points: The point tuple y (repeats allowed)
        level: Level l (or the level at the first point for vector levels)
        estimate: Estimated value
        stderr: Monte Carlo standard error (0 for exact values)
        budget: Samples used
        window: Domain metadata
        sampler: How the conditioned field was drawn
        diagnostics: Extra numbers (window sensitivity, uncertified fraction, ...)
    """

    target: str
    points: tuple[Site, ...]
    level: float
    estimate: float
    stderr: float
    budget: int
    window: dict[str, Any] = field(default_factory=dict)
    sampler: str = "exact"
    diagnostics: dict[str, float] = field(default_factory=dict)


def _level_vector(level: float | Sequence[float] | np.ndarray, n: int) -> np.ndarray:
    values = np.asarray(level, dtype=float)
    if values.ndim == 0:
        return np.full(n, float(values))
    if values.shape != (n,):
        raise ChaosError(f"level vector has shape {values.shape}, expected ({n},)")
    return values


def _distinct(points_idx: Sequence[int]) -> tuple[np.ndarray, tuple[int, ...]]:
    """Sorted distinct sites and the excess multiplicities alpha_tilde."""
    ubar, counts = np.unique(np.asarray(points_idx, dtype=np.int64), return_counts=True)
    return ubar, tuple(int(c) - 1 for c in counts)


@lru_cache(maxsize=64)
def _count_table(domain: _DomainGeometry, max_diameter: int | None, part: str) -> ClusterCountTable:
    return ClusterCountTable(domain, max_diameter=max_diameter, part=part)


def _derivative_function(domain: _DomainGeometry, max_diameter: int | None, part: str):
    """d_ybar Xi on mask batches, through the exhaustive table when the domain is small."""
    if domain.n_sites <= get_settings().table_max_sites:
        table = _count_table(domain, max_diameter, part)
        return lambda masks, idx: table.derivative(table.encode(masks), idx)
    return lambda masks, idx: discrete_derivative_batch(domain, masks, idx, max_diameter, part)


def relevant_sites(domain: _DomainGeometry, max_diameter: int | None = None, part: str = "both") -> np.ndarray:
    """Sites whose value can change the count, from the exhaustive table."""
    return _count_table(domain, max_diameter, part).relevant_sites


def _regression_hermite(
    covariance: np.ndarray,
    pins: np.ndarray,
    alpha_tilde: tuple[int, ...],
    draws: np.ndarray,
    pin_values: np.ndarray,
) -> np.ndarray:
    """H^{alpha~} w.r.t. Cov[f(pins) | f(rest)] at nu(pins) - E[f(pins) | f(rest)]."""
    if not any(alpha_tilde):
        return np.ones(draws.shape[0])
    rest = np.setdiff1d(np.arange(covariance.shape[0]), pins)
    pinned = covariance[np.ix_(pins, pins)]
    if rest.size == 0:
        return hermite_multivariate(pinned, alpha_tilde, np.broadcast_to(pin_values, (draws.shape[0], pins.size)))
    cho = linalg.cho_factor(covariance[np.ix_(rest, rest)], lower=True)
    weights = linalg.cho_solve(cho, covariance[np.ix_(rest, pins)]).T
    residual_cov = pinned - weights @ covariance[np.ix_(rest, pins)]
    argument = pin_values[None, :] - draws[:, rest] @ weights.T
    return hermite_multivariate(0.5 * (residual_cov + residual_cov.T), alpha_tilde, argument)


@dataclass
class _MonteCarloResult:
    mean: float
    stderr: float
    density: float
    certified_fraction: float = 1.0


def _scaled_mean(values: np.ndarray, density: float) -> tuple[float, float]:
    scaled = values * density
    n = scaled.size
    mean = math.fsum(scaled) / n
    stderr = float(scaled.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return mean, stderr


def _estimate_pivotal(
    domain: _DomainGeometry,
    covariance: np.ndarray,
    levels: np.ndarray,
    points_idx: Sequence[int],
    n: int,
    rng: np.random.Generator,
    max_diameter: int | None = None,
    part: str = "both",
    sampler: Any = None,
    certify: bool = False,
) -> _MonteCarloResult:
    if n <= 0:
        raise ChaosError("Monte Carlo budget must be positive")
    ubar, alpha_tilde = _distinct(points_idx)
    derivative = _derivative_function(domain, max_diameter, part)
    conditional = condition_matrix(covariance, ubar, levels[ubar])
    density = conditional.pinned_density
    batch = get_settings().batch_size
    values = np.empty(n)
    certified = 0
    for start in range(0, n, batch):
        size = min(batch, n - start)
        if sampler is None:
            draws = conditional.sample_many(size, rng)
        else:
            draws = conditional.krige(sampler.sample_many(size, rng))
        masks = draws > levels
        d = derivative(masks, ubar).astype(float)
        values[start : start + size] = d * _regression_hermite(covariance, ubar, alpha_tilde, draws, levels[ubar])
        if certify:
            certified += int(stabilisation_certified(domain, masks, ubar).sum())
    mean, stderr = _scaled_mean(values, density)
    return _MonteCarloResult(mean, stderr, density, certified / n)


def pivotal_intensity(
    model: CovarianceModel,
    domain: _DomainGeometry,
    level: float | Sequence[float],
    points: Sequence[Sequence[int]],
    n: int,
    rng: np.random.Generator,
    max_diameter: int | None = None,
    part: str = "both",
) -> PivotalEstimate:
    """
    Monte Carlo pivotal intensity P(nu; y) on a finite domain.

    Args:
        model: Covariance model of the field
        domain: Domain D (box or site set)
        level: Scalar level or a vector nu over the domain's sites
        points: Point tuple y; repeats are allowed
        n: Conditioned samples
        rng: Random stream
        max_diameter: Use the truncated count N_{<=r} when given
        part: Count both signs, or only "plus" or "minus" clusters

    Raises:
        ChaosError: On a zero budget
        DegenerateConditioningError: If the pinned block is singular
    """
    idx = domain.indices_of(points)
    levels = _level_vector(level, domain.n_sites)
    covariance = model.matrix_for(domain.coords)
    result = _estimate_pivotal(domain, covariance, levels, idx, n, rng, max_diameter, part)
    return PivotalEstimate(
        target="finite" if max_diameter is None else "truncated",
        points=tuple(tuple(int(c) for c in p) for p in points),
        level=float(levels[idx[0]]) if len(idx) else float(levels[0]),
        estimate=result.mean,
        stderr=result.stderr,
        budget=n,
        window={"n_sites": domain.n_sites},
        sampler="conditional",
        diagnostics={"pinned_density": result.density},
    )


def _window_law(model: CovarianceModel, box: LatticeBox, kind: str) -> tuple[np.ndarray, Any, str]:
    """Window covariance and, for the torus route, the unconditional sampler used for kriging."""
    settings = get_settings()
    if kind == "auto":
        kind = "exact" if box.n_sites <= settings.exact_max_sites or model.kind != "gff" else "torus"
    if kind == "exact":
        return model.matrix_for(box.coords), None, "exact"
    sampler = make_sampler(model, box, kind="torus")
    assert isinstance(sampler, TorusSampler)
    return sampler.window_covariance(), sampler, "torus+kriging"


def _centre_points(points: Sequence[Sequence[int]]) -> np.ndarray:
    array = np.asarray(points, dtype=np.int64)
    centre = (array.min(axis=0) + array.max(axis=0)) // 2
    return array - centre


def stationary_pivotal_intensity(
    model: CovarianceModel,
    level: float,
    points: Sequence[Sequence[int]],
    window_R: int,
    n: int,
    rng: np.random.Generator,
    sampler: str = "auto",
    max_diameter: int | None = None,
    part: str = "both",
    diagnostic: bool = True,
) -> PivotalEstimate:
    """
    P_R at centred points as a proxy for the stationary intensity P_inf.

    The points are translated so the tuple sits at the window centre, at
    d_inf distance at least window_R / 2 from the boundary. With
    ``diagnostic`` the estimate is repeated on Lambda_{window_R + 2} and the
    difference is reported as ``window_sensitivity``. The fraction of samples
    whose clusters next to the points touch the window edge is reported as
    ``uncertified_fraction``.

    Raises:
        WindowTooSmallError: If the points do not fit at that distance
    """
    shifted = _centre_points(points)
    spread = int(np.abs(shifted).max()) if shifted.size else 0
    if spread > window_R // 2:
        raise WindowTooSmallError(
            f"points spread {spread} do not fit at distance {window_R // 2} from the boundary of Lambda_{window_R}"
        )
    d = model.d

    def run(R: int, stream: np.random.Generator) -> tuple[_MonteCarloResult, str]:
        box = make_box(d, R)
        covariance, unconditional, label = _window_law(model, box, sampler)
        idx = box.indices_of(shifted.tolist())
        levels = np.full(box.n_sites, float(level))
        result = _estimate_pivotal(box, covariance, levels, idx, n, stream, max_diameter, part, unconditional, True)
        return result, label

    primary, label = run(window_R, rng)
    diagnostics = {
        "uncertified_fraction": 1.0 - primary.certified_fraction,
        "pinned_density": primary.density,
    }
    if diagnostic:
        second, _ = run(window_R + 2, replicate_stream(job_seed(rng), 1))
        diagnostics["window_sensitivity"] = abs(primary.mean - second.mean)
        diagnostics["window_sensitivity_se"] = math.hypot(primary.stderr, second.stderr)
        diagnostics["second_window_estimate"] = second.mean
    return PivotalEstimate(
        target="stationary" if max_diameter is None else "truncated",
        points=tuple(tuple(int(c) for c in p) for p in shifted),
        level=float(level),
        estimate=primary.mean,
        stderr=primary.stderr,
        budget=n,
        window={"shape": "box", "R": window_R, "d": d},
        sampler=label,
        diagnostics=diagnostics,
    )


def halfspace_pivotal_intensity(
    model: CovarianceModel,
    level: float,
    k: int,
    window_R: int,
    n: int,
    rng: np.random.Generator,
    part: str = "both",
) -> PivotalEstimate:
    """
    Half-space intensity at height k: a single point (k, 0, ..., 0) on the
    window {0 <= x_1 <= k + window_R, |x_i| <= window_R for i >= 2}.

    Raises:
        ChaosError: If k < 0
        WindowTooSmallError: If window_R < 1
    """
    if k < 0:
        raise ChaosError(f"height must be non-negative, got {k}")
    if window_R < 1:
        raise WindowTooSmallError("the half-space window needs window_R >= 1")
    d = model.d
    lower = (0,) + (-window_R,) * (d - 1)
    upper = (k + window_R,) + (window_R,) * (d - 1)
    domain = rectangle_domain(lower, upper)
    budget = get_settings().exact_max_sites
    if domain.n_sites > budget:
        raise WindowTooSmallError(f"half-space window has {domain.n_sites} sites, above the dense budget {budget}")
    point = (k,) + (0,) * (d - 1)
    levels = np.full(domain.n_sites, float(level))
    covariance = model.matrix_for(domain.coords)
    result = _estimate_pivotal(
        domain, covariance, levels, [domain.index_of(point)], n, rng, part=part, certify=True
    )
    return PivotalEstimate(
        target="halfspace",
        points=(point,),
        level=float(level),
        estimate=result.mean,
        stderr=result.stderr,
        budget=n,
        window={"shape": "halfspace", "height": k, "R": window_R, "d": d},
        sampler="exact",
        diagnostics={"uncertified_fraction": 1.0 - result.certified_fraction},
    )


def diameter(points: Sequence[Sequence[int]]) -> int:
    """d_inf diameter of a point set."""
    array = np.asarray(points, dtype=np.int64)
    return int((array.max(axis=0) - array.min(axis=0)).max()) if array.size else 0


def truncated_pivotal_intensity(
    model: CovarianceModel,
    level: float,
    points: Sequence[Sequence[int]],
    r: int,
    window_R: int,
    n: int,
    rng: np.random.Generator,
    sampler: str = "auto",
) -> PivotalEstimate:
    """
    Intensity of the diameter-<= r count N_{<=r}.

    Returns an exact 0 without sampling when diam_inf(ybar) > r + 2, the
    support bound of truncated intensities.
    """
    if r < 0:
        raise ChaosError(f"diameter cutoff must be non-negative, got {r}")
    if diameter(points) > r + 2:
        return PivotalEstimate(
            target="truncated",
            points=tuple(tuple(int(c) for c in p) for p in points),
            level=float(level),
            estimate=0.0,
            stderr=0.0,
            budget=0,
            window={"R": window_R, "r": r},
            sampler="none",
            diagnostics={"outside_support": 1.0},
        )
    estimate = stationary_pivotal_intensity(
        model, level, points, window_R, n, rng, sampler=sampler, max_diameter=r, diagnostic=False
    )
    estimate.window["r"] = r
    return estimate


def joint_pivotal_intensity(
    model: CovarianceModel,
    domain: _DomainGeometry,
    level: float,
    x_points: Sequence[Sequence[int]],
    y_points: Sequence[Sequence[int]],
    t: float,
    n: int,
    rng: np.random.Generator,
    max_diameter: int | None = None,
) -> PivotalEstimate:
    """
    Joint intensity P^t(x; y) for the pair (f, f^t), f^t = t f + sqrt(1 - t^2) f~.

    Raises:
        ChaosError: If t is outside [0, 1)
    """
    if not 0.0 <= t < 1.0:
        raise ChaosError(f"coupling parameter must lie in [0, 1), got {t}")
    if n <= 0:
        raise ChaosError("Monte Carlo budget must be positive")
    sites = domain.n_sites
    K = model.matrix_for(domain.coords)
    joint = np.block([[K, t * K], [t * K, K]])
    x_bar, x_tilde = _distinct(domain.indices_of(x_points))
    y_bar, y_tilde = _distinct(domain.indices_of(y_points))
    pins = np.concatenate([x_bar, sites + y_bar])
    pin_values = np.full(pins.size, float(level))
    conditional = condition_matrix(joint, pins, pin_values)
    density = conditional.pinned_density
    derivative = _derivative_function(domain, max_diameter, "both")
    batch = get_settings().batch_size
    values = np.empty(n)
    for start in range(0, n, batch):
        size = min(batch, n - start)
        draws = conditional.sample_many(size, rng)
        first = derivative(draws[:, :sites] > level, x_bar).astype(float)
        second = derivative(draws[:, sites:] > level, y_bar).astype(float)
        hermite = _regression_hermite(joint, pins, x_tilde + y_tilde, draws, pin_values)
        values[start : start + size] = first * second * hermite
    mean, stderr = _scaled_mean(values, density)
    return PivotalEstimate(
        target="joint",
        points=tuple(tuple(int(c) for c in p) for p in list(x_points) + list(y_points)),
        level=float(level),
        estimate=mean,
        stderr=stderr,
        budget=n,
        window={"n_sites": sites, "t": t, "split": len(x_points)},
        sampler="conditional",
        diagnostics={"pinned_density": density},
    )


def _orthant_probabilities(mean: np.ndarray, covariance: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """
    P(bit pattern) for every pattern over k coordinates; bit 1 means W_i > level_i.

    Pattern b is the integer whose bit i is coordinate i.
    """
    k = levels.size
    if k == 0:
        return np.ones(1)
    bits = ((np.arange(2**k)[:, None] >> np.arange(k)[None, :]) & 1).astype(bool)
    out = np.empty(2**k)
    sd = np.sqrt(np.diag(covariance))
    for code, row in enumerate(bits):
        flip = np.where(row, -1.0, 1.0)
        upper = flip * (levels - mean)
        if k == 1:
            out[code] = stats.norm.cdf(upper[0] / sd[0])
            continue
        cov = covariance * np.outer(flip, flip)
        out[code] = stats.multivariate_normal.cdf(
            upper, np.zeros(k), cov, abseps=CDF_TOLERANCE, releps=CDF_TOLERANCE, maxpts=200_000 * k
        )
    return np.clip(out, 0.0, 1.0)


def _full_codes(table: ClusterCountTable, sites: np.ndarray) -> np.ndarray:
    """Table codes for all bit patterns over ``sites``, other sites cleared."""
    k = sites.size
    bits = ((np.arange(2**k)[:, None] >> np.arange(k)[None, :]) & 1).astype(np.int64)
    return (bits * (np.int64(1) << sites.astype(np.int64))[None, :]).sum(axis=1)


@dataclass
class OrthantMoments:
    mean: float
    second_moment: float
    variance: float
    relevant_sites: tuple[int, ...]


def _check_orthant_domain(domain: _DomainGeometry) -> None:
    if domain.n_sites > ORTHANT_MAX_SITES:
        raise ChaosError(
            f"orthant enumeration supports |D| <= {ORTHANT_MAX_SITES}, got {domain.n_sites}"
        )


def orthant_functional_moments(
    model: CovarianceModel,
    domain: _DomainGeometry,
    level: float | Sequence[float],
    epsilon: float = 0.0,
    max_diameter: int | None = None,
    part: str = "both",
) -> OrthantMoments:
    """
    Exact E[Xi^eps], E[(Xi^eps)^2] and Var[Xi^eps] through orthant probabilities.

    Xi^eps(h) = E[Xi(h + eps Z)], so Xi^eps(f - nu) has the law of Xi(W - nu)
    with W ~ N(0, K + eps^2 I). Only sites that can change the count enter the
    orthant enumeration.
    """
    _check_orthant_domain(domain)
    table = _count_table(domain, max_diameter, part)
    rel = table.relevant_sites
    levels = _level_vector(level, domain.n_sites)
    K = model.matrix_for(domain.coords) + epsilon**2 * np.eye(domain.n_sites)
    codes = _full_codes(table, rel)
    xi = table.values[codes].astype(float)
    probs = _orthant_probabilities(np.zeros(rel.size), K[np.ix_(rel, rel)], levels[rel])
    mean = math.fsum(xi * probs)
    second = math.fsum(xi * xi * probs)
    return OrthantMoments(mean, second, second - mean * mean, tuple(int(s) for s in rel))


def smoothed_functional_mean(
    model: CovarianceModel,
    domain: _DomainGeometry,
    level: float | Sequence[float],
    epsilon: float,
    max_diameter: int | None = None,
) -> float:
    """E[Xi^eps(f - nu)] for the Gaussian-smoothed cluster count."""
    return orthant_functional_moments(model, domain, level, epsilon, max_diameter).mean


def _orthant_pivotal_distinct(
    K: np.ndarray, table: ClusterCountTable, levels: np.ndarray, ubar: np.ndarray
) -> float:
    rel = table.relevant_sites
    if not set(ubar.tolist()) <= set(rel.tolist()):
        return 0.0
    rest = np.setdiff1d(rel, ubar)
    order = np.concatenate([ubar, rest])
    local = K[np.ix_(order, order)]
    conditional = condition_matrix(local, np.arange(ubar.size), levels[ubar])
    free = conditional.free_indices
    probs = _orthant_probabilities(
        conditional.mean[free], conditional.conditional_covariance, levels[rest]
    )
    derivative = table.derivative(_full_codes(table, rest), ubar).astype(float)
    return conditional.pinned_density * math.fsum(derivative * probs)


def orthant_pivotal_intensity(
    model: CovarianceModel,
    domain: _DomainGeometry,
    level: float | Sequence[float],
    points: Sequence[Sequence[int]],
    epsilon: float = 0.0,
    max_diameter: int | None = None,
    part: str = "both",
    step: float = 1e-2,
) -> float:
    """
    Exact pivotal intensity of Xi^eps on a small domain.

    Distinct points use phi(nu) * sum d_ybar Xi * P(orthant | pins). Excess
    multiplicities are taken as central differences in the level of the
    distinct-point intensity, P(nu; y) = (-1)^{|alpha~|} d^{alpha~}_nu P(nu; ybar).
    """
    _check_orthant_domain(domain)
    table = _count_table(domain, max_diameter, part)
    K = model.matrix_for(domain.coords) + epsilon**2 * np.eye(domain.n_sites)
    ubar, alpha_tilde = _distinct(domain.indices_of(points))
    base = _level_vector(level, domain.n_sites)

    def differentiate(levels: np.ndarray, remaining: tuple[int, ...]) -> float:
        j = next((i for i, a in enumerate(remaining) if a > 0), None)
        if j is None:
            return _orthant_pivotal_distinct(K, table, levels, ubar)
        lowered = remaining[:j] + (remaining[j] - 1,) + remaining[j + 1 :]
        up, down = levels.copy(), levels.copy()
        up[ubar[j]] += step
        down[ubar[j]] -= step
        return -(differentiate(up, lowered) - differentiate(down, lowered)) / (2 * step)

    return differentiate(base, alpha_tilde)


def finite_difference_intensity(
    model: CovarianceModel,
    domain: _DomainGeometry,
    level: float | Sequence[float],
    points: Sequence[Sequence[int]],
    h: float = 0.05,
    epsilon: float = 0.0,
) -> float:
    """
    Central mixed difference of v -> E[Xi^eps(f - nu + v)] in the directions of ``points``.
    """
    idx = domain.indices_of(points)
    base = _level_vector(level, domain.n_sites)
    total = 0.0
    for signs in product((1, -1), repeat=len(idx)):
        shifted = base.copy()
        for i, s in zip(idx, signs):
            shifted[i] -= s * h
        total += math.prod(signs) * smoothed_functional_mean(model, domain, shifted, epsilon)
    return total / (2 * h) ** len(idx)


def canonical_shape(points: Sequence[Sequence[int]]) -> tuple[Site, ...]:
    """Translation class of a point tuple: sorted points shifted so the first is the origin."""
    ordered = sorted(tuple(int(c) for c in p) for p in points)
    first = ordered[0]
    return tuple(tuple(c - f for c, f in zip(p, first)) for p in ordered)


@dataclass
class IntensityTable:
    """
    Pivotal intensities over index multisets of one domain.

    Attributes:
        domain: The domain the multisets index
        order: m
        level: Level l
        covariance: K on the domain
        entries: Sorted site-index multiset mapped to P
        stderr: Standard errors of Monte Carlo entries
        cutoff: d_inf diameter cutoff applied when the table was built
    """

    domain: _DomainGeometry
    order: int
    level: float
    covariance: np.ndarray
    entries: dict[tuple[int, ...], float]
    stderr: dict[tuple[int, ...], float] = field(default_factory=dict)
    cutoff: int | None = None
    method: str = "mc"

    def value(self, points_idx: Sequence[int]) -> float:
        return self.entries.get(tuple(sorted(int(i) for i in points_idx)), 0.0)

    @property
    def support(self) -> np.ndarray:
        return np.array(sorted({i for key in self.entries for i in key}), dtype=np.int64)

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Symmetric dense tensor over the support sites, and the support."""
        support = self.support
        position = {int(s): k for k, s in enumerate(support)}
        tensor = np.zeros((support.size,) * self.order)
        for key, value in self.entries.items():
            local = tuple(position[i] for i in key)
            for perm in set(permutations(local)):
                tensor[perm] = value
        return tensor, support

    @classmethod
    def from_stationary(
        cls,
        domain: _DomainGeometry,
        order: int,
        level: float,
        covariance: np.ndarray,
        shapes: dict[tuple[Site, ...], float],
        cutoff: int | None = None,
    ) -> "IntensityTable":
        """Spread stationary intensities, keyed by canonical shape, over every multiset of the domain."""
        entries: dict[tuple[int, ...], float] = {}
        sites = range(domain.n_sites)
        for key in combinations_with_replacement(sites, order):
            points = [domain.site(i) for i in key]
            if cutoff is not None and diameter(points) > cutoff:
                continue
            value = shapes.get(canonical_shape(points))
            if value is not None:
                entries[key] = value
        return cls(domain, order, level, covariance, entries, cutoff=cutoff, method="stationary")


def _multiplicity_factorial(key: Sequence[int]) -> int:
    _, counts = np.unique(np.asarray(key), return_counts=True)
    return math.prod(math.factorial(int(c)) for c in counts)


def _table_job(index: int, payload: dict[str, Any]) -> tuple[float, float]:
    key = payload["keys"][index]
    rng = replicate_stream(payload["seed"], index, payload["order"])
    result = _estimate_pivotal(
        payload["domain"],
        payload["covariance"],
        payload["levels"],
        key,
        payload["n"],
        rng,
        payload["max_diameter"],
    )
    return result.mean, result.stderr


def build_intensity_table(
    model: CovarianceModel,
    domain: _DomainGeometry,
    level: float,
    m: int,
    n: int = 2000,
    seed: int | None = None,
    method: str = "auto",
    cutoff: int | None = None,
    sites: Sequence[int] | None = None,
    max_diameter: int | None = None,
    workers: int = 1,
) -> IntensityTable:
    """
    Pivotal intensities for every index multiset of size m over ``sites``.

    ``method`` is "orthant" (exact, small domains), "mc" (one Monte Carlo job
    per multiset, fanned out over workers with per-job streams) or "auto".
    Multisets with d_inf diameter above ``cutoff`` are left out.
    """
    if m < 1:
        raise ChaosError(f"intensity tables need m >= 1, got {m}")
    settings = get_settings()
    if sites is None:
        if domain.n_sites <= settings.table_max_sites:
            sites = relevant_sites(domain, max_diameter)
        else:
            sites = np.arange(domain.n_sites)
    sites = np.asarray(sites, dtype=np.int64)
    keys = [
        key
        for key in combinations_with_replacement(sites.tolist(), m)
        if cutoff is None or diameter([domain.site(i) for i in key]) <= cutoff
    ]
    if method == "auto":
        method = "orthant" if domain.n_sites <= ORTHANT_MAX_SITES else "mc"
    covariance = model.matrix_for(domain.coords)
    levels = np.full(domain.n_sites, float(level))
    entries: dict[tuple[int, ...], float] = {}
    errors: dict[tuple[int, ...], float] = {}
    if method == "orthant":
        for key in keys:
            entries[key] = orthant_pivotal_intensity(
                model, domain, level, [domain.site(i) for i in key], max_diameter=max_diameter
            )
            errors[key] = 0.0
    elif method == "mc":
        payload = {
            "keys": keys,
            "seed": settings.seed if seed is None else seed,
            "order": m,
            "domain": domain,
            "covariance": covariance,
            "levels": levels,
            "n": n,
            "max_diameter": max_diameter,
        }
        results = map_replicates(_table_job, len(keys), payload, workers=workers)
        for key, (mean, stderr) in zip(keys, results):
            entries[key] = mean
            errors[key] = stderr
    else:
        raise ChaosError(f"unknown intensity method '{method}'")
    logger.info("Built order-%d intensity table with %d entries (%s)", m, len(entries), method)
    return IntensityTable(domain, m, float(level), covariance, entries, errors, cutoff, method)


def chaos_component(
    domain: _DomainGeometry,
    level: float,
    m: int,
    table: IntensityTable,
    sample,
) -> np.ndarray | float:
    """
    Q_m = (1/m!) sum over x in D^m of :f(x_1)...f(x_m): P(x), on one or more realizations.

    ``sample`` is a FieldSample or an array of values (n_sites,) or (k, n_sites).

    Raises:
        ChaosError: If the table does not belong to this domain and order
    """
    if table.order != m or table.domain.n_sites != domain.n_sites:
        raise ChaosError("intensity table does not match the requested order and domain")
    values = getattr(sample, "values", sample)
    values = np.asarray(values, dtype=float)
    single = values.ndim == 1
    values = np.atleast_2d(values)
    if values.shape[1] != domain.n_sites:
        raise ChaosError("sample does not cover the domain")
    K = table.covariance
    if m == 1:
        weights = np.zeros(domain.n_sites)
        for (i,), p in table.entries.items():
            weights[i] = p
        out = values @ weights
    elif m == 2:
        P = np.zeros((domain.n_sites, domain.n_sites))
        for (i, j), p in table.entries.items():
            P[i, j] = P[j, i] = p
        out = 0.5 * (np.einsum("ki,ij,kj->k", values, P, values) - np.sum(P * K))
    else:
        out = np.zeros(values.shape[0])
        for key, p in table.entries.items():
            out += p / _multiplicity_factorial(key) * wick_product_values(K, key, values)
    return float(out[0]) if single else out


def chaos_component_variance(
    table: IntensityTable,
    model: CovarianceModel | None = None,
    domain: _DomainGeometry | None = None,
    m: int | None = None,
) -> float:
    """
    Var[Q_m] = (1/m!) sum over x, y in D^m of prod_i K(x_i, y_i) P(x) P(y).

    The covariance comes from the table unless ``model`` and ``domain`` are given.
    """
    order = table.order if m is None else m
    if order != table.order:
        raise ChaosError("requested order does not match the table")
    tensor, support = table.dense()
    if support.size == 0:
        return 0.0
    if model is not None:
        coords = (domain or table.domain).coords[support]
        K = model.matrix_for(coords)
    else:
        K = table.covariance[np.ix_(support, support)]
    contracted = tensor
    for _ in range(order):
        contracted = np.tensordot(contracted, K, axes=([0], [0]))
    return float(np.sum(contracted * tensor)) / math.factorial(order)


def _permanent(matrix: np.ndarray) -> float:
    size = matrix.shape[0]
    return math.fsum(
        math.prod(float(matrix[i, p[i]]) for i in range(size)) for p in permutations(range(size))
    )


@dataclass
class TailVarianceEstimate:
    order: int
    value: float
    stderr: float
    nodes: int
    pairs: int


def tail_nodes(m: int, nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Nodes s_k in (0, 1) and weights w_k with
    sum w_k g(s_k) ~ integral_0^1 g(s) (1 - s)^{m-1} / (m-1)! ds
    for g with a (1 - s)^{-1/2} endpoint singularity.
    """
    u, w = special.roots_jacobi(nodes, -0.5, 0.0)
    s = 0.5 * (1.0 + u)
    if np.any(s >= 1.0) or np.any(s < 0.0):
        raise QuadratureError("tail-variance nodes must lie in [0, 1)")
    weights = w / math.sqrt(2.0) * np.sqrt(1.0 - s) * (1.0 - s) ** (m - 1) / math.factorial(m - 1)
    return s, weights


def tail_variance(
    model: CovarianceModel,
    domain: _DomainGeometry,
    level: float,
    m: int,
    n: int,
    rng: np.random.Generator,
    nodes: int = 8,
    sites: Sequence[int] | None = None,
) -> TailVarianceEstimate:
    """
    Var[sum over m' >= m of Q_m'] = sum over x, y in D^m of prod K(x_i, y_i)
    times the nested simplex integral of P^t(x; y).

    The simplex integral reduces to one dimension with weight
    (1 - s)^{m-1} / (m-1)!, evaluated with Gauss-Jacobi nodes. Index tuples are
    grouped into multisets X, Y with weight m! perm(K[X, Y]) / (alpha_X! alpha_Y!).
    """
    if m < 1:
        raise ChaosError(f"tail order must be >= 1, got {m}")
    if sites is None:
        sites = relevant_sites(domain) if domain.n_sites <= get_settings().table_max_sites else range(domain.n_sites)
    sites = [int(s) for s in sites]
    K = model.matrix_for(domain.coords)
    s_nodes, weights = tail_nodes(m, nodes)
    multisets = list(combinations_with_replacement(sites, m))
    pairs = []
    for a, X in enumerate(multisets):
        for Y in multisets[a:]:
            coefficient = (
                math.factorial(m)
                * _permanent(K[np.ix_(X, Y)])
                / (_multiplicity_factorial(X) * _multiplicity_factorial(Y))
            )
            if coefficient != 0.0:
                pairs.append((X, Y, coefficient * (1 if X == Y else 2)))
    total = 0.0
    variance = 0.0
    for s, weight in zip(s_nodes, weights):
        for X, Y, coefficient in pairs:
            estimate = joint_pivotal_intensity(
                model, domain, level,
                [domain.site(i) for i in X], [domain.site(i) for i in Y],
                float(s), n, rng,
            )
            total += weight * coefficient * estimate.estimate
            variance += (weight * coefficient * estimate.stderr) ** 2
    logger.info("Tail variance of order %d: %.6g over %d pairs x %d nodes", m, total, len(pairs), nodes)
    return TailVarianceEstimate(m, total, math.sqrt(variance), nodes, len(pairs))


@dataclass
class VarianceDecomposition:
    """Sum over m < M of Var[Q_m] plus the order-M tail, against the exact variance."""

    direct_variance: float
    component_variances: dict[int, float]
    tail: TailVarianceEstimate
    total: float
    gap: float


def variance_decomposition(
    model: CovarianceModel,
    domain: _DomainGeometry,
    level: float,
    M: int,
    n: int,
    rng: np.random.Generator,
    nodes: int = 8,
) -> VarianceDecomposition:
    """
    Check sum over m < M of Var[Q_m] + tail_variance(M) = Var[Xi] on a small domain.

    Component variances use exact orthant intensities; the tail is Monte Carlo.
    """
    direct = orthant_functional_moments(model, domain, level).variance
    components = {}
    for m in range(1, M):
        table = build_intensity_table(model, domain, level, m, method="orthant")
        components[m] = chaos_component_variance(table)
    tail = tail_variance(model, domain, level, M, n, rng, nodes)
    total = math.fsum(components.values()) + tail.value
    return VarianceDecomposition(direct, components, tail, total, total - direct)


@dataclass
class MuDerivative:
    """
    Estimate of mu^{(m)}(l) from stationary intensities.

    Attributes:
        order: m
        level: l
        value: (-1)^m times the truncated offset sum
        stderr: Combined standard error
        radius: Offsets range over Lambda_radius
        tail_bound: Sum of |terms| on the outermost offset shell
        terms: Number of intensities estimated
        split: mu^{+(1)} and mu^{-(1)} for m = 1
    """

    order: int
    level: float
    value: float
    stderr: float
    radius: int
    tail_bound: float
    terms: int
    split: dict[str, float] = field(default_factory=dict)


def _offset_classes(d: int, m: int, radius: int) -> list[tuple[tuple[Site, ...], int, int]]:
    """
    Offset tuples (x_2, ..., x_m) up to translation and reflection of the point
    set, with their multiplicity and how many of them reach the outer shell.
    """
    box = LatticeBox(d, radius) if radius > 0 else None
    offsets = [tuple(int(c) for c in row) for row in box.coords] if box else [(0,) * d]
    weights: dict[tuple[Site, ...], list[int]] = {}
    for combo in product(offsets, repeat=m - 1):
        points = [(0,) * d] + list(combo)
        shape = canonical_shape(points)
        negated = canonical_shape([tuple(-c for c in p) for p in points])
        key = min(shape, negated)
        counts = weights.setdefault(key, [0, 0])
        counts[0] += 1
        counts[1] += int(max(sup_norm(x) for x in combo) == radius)
    return [(key, total, shell) for key, (total, shell) in sorted(weights.items())]


def offset_radius(window_R: int) -> int:
    """Largest offset radius whose centred tuples fit Lambda_{window_R}."""
    return max(1, window_R // 2)


def mu_derivative(
    model: CovarianceModel,
    level: float,
    m: int,
    window_R: int,
    n: int,
    rng: np.random.Generator,
    radius: int | None = None,
    sampler: str = "auto",
) -> MuDerivative:
    """
    mu^{(m)}(l) = (-1)^m sum over x_2..x_m of P_inf(0, x_2, ..., x_m), offsets in Lambda_radius.

    Without ``radius`` the offsets fill the widest box whose tuples still sit
    at the window centre, see ``offset_radius``. The ``tail_bound`` reports the
    mass carried by the outer shell of that box.

    For m = 1 the result also carries the derivatives of the signed densities
    mu^+ and mu^-.
    """
    if not 1 <= m <= MAX_MU_ORDER:
        raise ChaosError(f"mu derivatives are supported for 1 <= m <= {MAX_MU_ORDER}, got {m}")
    sign = -1.0 if m % 2 else 1.0
    if m == 1:
        estimate = stationary_pivotal_intensity(
            model, level, [(0,) * model.d], window_R, n, rng, sampler=sampler, diagnostic=False
        )
        split = {}
        for part in ("plus", "minus"):
            part_estimate = stationary_pivotal_intensity(
                model, level, [(0,) * model.d], window_R, n, replicate_stream(job_seed(rng), 2),
                sampler=sampler, part=part, diagnostic=False,
            )
            split[part] = -part_estimate.estimate
            split[f"{part}_stderr"] = part_estimate.stderr
        return MuDerivative(1, float(level), -estimate.estimate, estimate.stderr, 0, 0.0, 1, split)

    radius = offset_radius(window_R) if radius is None else radius
    classes = _offset_classes(model.d, m, radius)
    base_seed = job_seed(rng)
    total = 0.0
    variance = 0.0
    tail = 0.0
    for index, (shape, weight, shell) in enumerate(classes):
        estimate = stationary_pivotal_intensity(
            model, level, list(shape), window_R, n, replicate_stream(base_seed, index),
            sampler=sampler, diagnostic=False,
        )
        term = weight * estimate.estimate
        total += term
        variance += (weight * estimate.stderr) ** 2
        tail += shell * abs(estimate.estimate)
    return MuDerivative(m, float(level), sign * total, math.sqrt(variance), radius, tail, len(classes))


def pinned_arm_probability(
    model: CovarianceModel,
    level: float,
    pins: Sequence[Sequence[int]],
    r: int,
    window_R: int,
    n: int,
    rng: np.random.Generator,
) -> PivotalEstimate:
    """
    P[pinned truncated arm of length r from a neighbour of some pin | f(pins) = l].

    The window Lambda_{window_R} must be strictly larger than every pin + Lambda_r.
    """
    if n <= 0:
        raise ChaosError("Monte Carlo budget must be positive")
    box = make_box(model.d, window_R)
    pins = [tuple(int(c) for c in p) for p in pins]
    if any(sup_norm(p) + r >= window_R for p in pins):
        raise WindowTooSmallError(f"window half-side {window_R} cannot certify arms of length {r}")
    idx = box.indices_of(pins)
    covariance = model.matrix_for(box.coords)
    conditional = condition_matrix(covariance, np.unique(idx), np.full(len(set(idx.tolist())), float(level)))
    hits = np.empty(n)
    batch = get_settings().batch_size
    for start in range(0, n, batch):
        size = min(batch, n - start)
        draws = conditional.sample_many(size, rng)
        for k, row in enumerate(draws > level):
            hits[start + k] = float(arm_event(box, row, (0,) * model.d, r, pins))
    mean = float(hits.mean())
    stderr = float(math.sqrt(max(mean * (1 - mean), 0.0) / n))
    return PivotalEstimate(
        target="pinned-arm",
        points=tuple(pins),
        level=float(level),
        estimate=mean,
        stderr=stderr,
        budget=n,
        window={"R": window_R, "r": r},
        sampler="conditional",
    )


@dataclass
class DepinningResult:
    """Pinned probability times density, the unpinned P = P[A, Y <= l], and their ratio to the bound."""

    pinned: float
    unpinned: float
    lambda_min: float
    ratio: float


def depinning_check(
    covariance: np.ndarray,
    n_x: int,
    orthant: Sequence[tuple[int, float]],
    level: float,
) -> DepinningResult:
    """
    Compare P[A | Y = l] phi_Y(l) with lambda_min^{-m} P max(1, log(1/P)^{m/2}).

    The first ``n_x`` coordinates are X and the rest Y (m of them); A is the
    orthant {sign_i (X_i - a_i) > 0} given as (sign_i, a_i) pairs.
    """
    cov = np.asarray(covariance, dtype=float)
    dim = cov.shape[0]
    m = dim - n_x
    if m < 1 or len(orthant) != n_x:
        raise ChaosError("need at least one pinned coordinate and one orthant constraint per X coordinate")
    signs = np.array([s for s, _ in orthant], dtype=float)
    thresholds = np.array([a for _, a in orthant], dtype=float)
    # rewrite A as {W_i < u_i} with W = -sign X
    flip = np.concatenate([-signs, np.ones(m)])
    upper = np.concatenate([-signs * thresholds, np.full(m, float(level))])
    flipped = cov * np.outer(flip, flip)
    unpinned = float(
        stats.multivariate_normal.cdf(upper, np.zeros(dim), flipped, abseps=CDF_TOLERANCE, releps=CDF_TOLERANCE)
    )
    conditional = condition_matrix(flipped, np.arange(n_x, dim), np.full(m, float(level)))
    free = conditional.free_indices
    if n_x == 1:
        sd = math.sqrt(conditional.conditional_covariance[0, 0])
        given = float(stats.norm.cdf((upper[0] - conditional.mean[free][0]) / sd))
    else:
        given = float(
            stats.multivariate_normal.cdf(
                upper[:n_x],
                conditional.mean[free],
                conditional.conditional_covariance,
                abseps=CDF_TOLERANCE,
                releps=CDF_TOLERANCE,
            )
        )
    pinned = given * conditional.pinned_density
    lam = lambda_min(cov)
    if unpinned <= 0.0:
        return DepinningResult(pinned, unpinned, lam, math.inf if pinned > 0 else 0.0)
    bound = lam ** (-m) * unpinned * max(1.0, math.log(1.0 / unpinned) ** (m / 2))
    return DepinningResult(pinned, unpinned, lam, pinned / bound)
