"""
Kernel constants and lattice kernel-sum asymptotics.

Continuum constants are integrals of |x - y|^{-alpha} over pairs of points of
[-1, 1]^d (or of its boundary). Pair integrals are written as integrals of
the cube autocorrelation S_d(u) = prod (2 - |u_i|)_+ against the kernel, and
the point singularities are removed by Duffy transforms around each singular
corner of a box subdivision. Lattice sums over pairs of a box use the
difference-count identity

    sum over x, y in Lambda_R of h(x - y) = sum over u of N_R(u) h(u),
    N_R(u) = prod (2R + 1 - |u_i|)_+.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product

import numpy as np
from numpy.polynomial import legendre
from scipy import integrate, special

from gfflab.core.errors import NumericalError, UsageError
from gfflab.services.green_service import CovarianceModel, asymptotic_constant

logger = logging.getLogger(__name__)

DEFAULT_NODES = 16


class KernelError(UsageError):
    """Invalid kernel-constant request (divergent integral or empty grid)."""

    pass


class ExtrapolationError(NumericalError):
    """Too few usable sums to extrapolate."""

    pass


@dataclass
class KernelSumResult:
    """
    Lattice kernel sums and their normalized limit.

    Attributes:
        name: Constant name (e.g. "beta")
        d: Dimension
        k: Power of the kernel
        R_list: Box half-sides
        raw: Sums at each R
        exponent: p in the normalization R^p (log R)^q
        log_power: q (0 or 1)
        normalized: raw / (R^p (log R)^q)
        extrapolated: Richardson limit of the normalized values in 1/R
        residual: RMS residual of the extrapolation fit
        log_slopes: d log(raw) / d log R between consecutive R
    """

    name: str
    d: int
    k: int
    R_list: list[int]
    raw: list[float]
    exponent: int
    log_power: int
    normalized: list[float]
    extrapolated: float
    residual: float
    log_slopes: list[float] = field(default_factory=list)


def cube_autocorrelation(x: Sequence[float] | np.ndarray) -> np.ndarray | float:
    """
    S_d(x) = Vol([-1, 1]^d intersected with [-1, 1]^d + x) = prod (2 - |x_i|)_+.

    >>> float(cube_autocorrelation([0.0, 0.0, 0.0]))
    8.0
    """
    x = np.asarray(x, dtype=float)
    return np.clip(2.0 - np.abs(x), 0.0, None).prod(axis=-1)


@lru_cache(maxsize=32)
def _legendre_unit(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=64)
def _jacobi_unit(n: int, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights with sum w g(s) ~ integral_0^1 g(s) s^b ds."""
    x, w = special.roots_jacobi(n, 0.0, b)
    return 0.5 * (x + 1.0), w * 0.5 ** (b + 1.0)


def _tensor_nodes(dim: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    if dim == 0:
        return np.zeros((1, 0)), np.ones(1)
    x, w = _legendre_unit(n)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    weights = np.meshgrid(*([w] * dim), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1), np.prod([g.ravel() for g in weights], axis=0)


def _smooth_box(f: Callable[[np.ndarray], np.ndarray], lo: np.ndarray, hi: np.ndarray, n: int) -> float:
    z, w = _tensor_nodes(lo.size, n)
    h = hi - lo
    return float(np.prod(h) * np.dot(w, f(lo + z * h)))


def _duffy_box(
    f: Callable[[np.ndarray], np.ndarray],
    lo: np.ndarray,
    hi: np.ndarray,
    corner: np.ndarray,
    exponent: float,
    n: int,
) -> float:
    """Integral over a box whose only singular point is the vertex ``corner``, f ~ |u - corner|^{-exponent}."""
    d = lo.size
    h = hi - lo
    direction = np.where(np.isclose(corner, lo), 1.0, -1.0)
    s, ws = _jacobi_unit(n, d - 1.0 - exponent)
    v, wv = _tensor_nodes(d - 1, n)
    total = 0.0
    for k in range(d):
        z = np.empty((s.size, v.shape[0], d))
        z[:, :, k] = s[:, None]
        others = [j for j in range(d) if j != k]
        z[:, :, others] = s[:, None, None] * v[None, :, :]
        u = corner + direction * h * z.reshape(-1, d)
        values = f(u).reshape(s.size, v.shape[0]) * s[:, None] ** exponent
        total += float(ws @ values @ wv)
    return float(np.prod(h)) * total


def singular_integral(
    f: Callable[[np.ndarray], np.ndarray],
    lower: Sequence[float],
    upper: Sequence[float],
    singular: Sequence[tuple[Sequence[float], float]] = (),
    breaks: Sequence[float] = (),
    n: int = DEFAULT_NODES,
) -> float:
    """
    Integrate f over a box with integrable point singularities.

    The box is cut along every coordinate of every singular point and at
    ``breaks`` (kinks of f), so singular points become box vertices. A box
    with one singular vertex is integrated by a Duffy transform from that
    vertex; a box with several is bisected until they are separated.

    Args:
        f: Vectorized integrand on arrays of shape (N, d)
        lower, upper: Box corners
        singular: (point, exponent) pairs with f ~ |u - point|^{-exponent}
        breaks: Coordinates (on every axis) where f has kinks
        n: Nodes per dimension
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    d = lower.size
    points = [(np.asarray(p, dtype=float), float(e)) for p, e in singular]
    merged: dict[tuple[float, ...], float] = {}
    for p, e in points:
        merged[tuple(p)] = merged.get(tuple(p), 0.0) + e
    if any(e >= d for e in merged.values()):
        raise KernelError("point singularity is not integrable")
    cuts = []
    for k in range(d):
        values = {lower[k], upper[k]}
        values.update(p[k] for p in merged if lower[k] < p[k] < upper[k])
        values.update(b for b in breaks if lower[k] < b < upper[k])
        cuts.append(sorted(values))

    def box(lo: np.ndarray, hi: np.ndarray) -> float:
        corners = [
            (np.asarray(p), e)
            for p, e in merged.items()
            if all(np.isclose(c, l) or np.isclose(c, u) for c, l, u in zip(p, lo, hi))
        ]
        if not corners:
            return _smooth_box(f, lo, hi, n)
        if len(corners) == 1:
            return _duffy_box(f, lo, hi, corners[0][0], corners[0][1], n)
        axis = int(np.flatnonzero(~np.isclose(corners[0][0], corners[1][0]))[0])
        mid = 0.5 * (lo[axis] + hi[axis])
        left_hi, right_lo = hi.copy(), lo.copy()
        left_hi[axis] = mid
        right_lo[axis] = mid
        return box(lo, left_hi) + box(right_lo, hi)

    total = 0.0
    for cell in product(*(range(len(c) - 1) for c in cuts)):
        lo = np.array([cuts[k][i] for k, i in enumerate(cell)])
        hi = np.array([cuts[k][i + 1] for k, i in enumerate(cell)])
        total += box(lo, hi)
    return total


def _kernel_integrand(alpha: float, shifts: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    def f(u: np.ndarray) -> np.ndarray:
        value = cube_autocorrelation(u)
        for t in shifts:
            value = value * np.linalg.norm(u + t, axis=1) ** (-alpha)
        return value

    return f


def _radial_integral(omega: np.ndarray, d: int, alpha: float, n: int = 8) -> float:
    """integral_0^{2 / max omega} r^{d-1-alpha} S_d(r omega) dr (exact for the polynomial S_d)."""
    rho = 2.0 / float(np.max(omega))
    s, w = _jacobi_unit(n, d - 1.0 - alpha)
    r = rho * s
    return rho ** (d - alpha) * float(w @ np.prod(2.0 - r[:, None] * omega[None, :], axis=1))


def _e_constant_spherical(d: int, alpha: float) -> float:
    tol = {"epsabs": 1e-11, "epsrel": 1e-11, "limit": 200}
    if d == 1:
        return 2.0 * _radial_integral(np.array([1.0]), 1, alpha)
    if d == 2:
        value, _ = integrate.quad(
            lambda th: _radial_integral(np.array([math.cos(th), math.sin(th)]), 2, alpha),
            0.0, math.pi / 2, points=[math.pi / 4], **tol,
        )
        return 4.0 * value
    if d == 3:

        def integrand(phi: float, theta: float) -> float:
            omega = np.array([math.sin(phi) * math.cos(theta), math.sin(phi) * math.sin(theta), math.cos(phi)])
            return math.sin(phi) * _radial_integral(omega, 3, alpha)

        def phi_opts(theta: float) -> dict:
            return {"points": [math.atan(1.0 / max(math.cos(theta), math.sin(theta)))], **tol}

        value, _ = integrate.nquad(
            integrand,
            [[0.0, math.pi / 2], [0.0, math.pi / 2]],
            opts=[phi_opts, {"points": [math.pi / 4], **tol}],
        )
        return 8.0 * value
    raise KernelError(f"the spherical scheme supports d <= 3, got {d}")


def e_constant(d: int, alpha: float, scheme: str = "duffy", n: int = DEFAULT_NODES) -> float:
    """
    E_{d,alpha} = integral over x, y in [-1, 1]^d of |x - y|^{-alpha}.

    Computed as integral of S_d(u) |u|^{-alpha} du. ``scheme`` selects Duffy
    cubature on the cube subdivision or an adaptive spherical quadrature
    (d <= 3); the two are independent.

    Raises:
        KernelError: If alpha is outside [0, d)
    """
    if d < 1:
        raise KernelError(f"dimension must be >= 1, got {d}")
    if not 0.0 <= alpha < d:
        raise KernelError(f"E_(d,alpha) diverges unless 0 <= alpha < d; got d={d}, alpha={alpha}")
    if scheme == "spherical":
        return _e_constant_spherical(d, alpha)
    if scheme != "duffy":
        raise KernelError(f"unknown quadrature scheme '{scheme}'")
    return e_function(d, alpha, 1, [np.zeros(d)], n)


def e_function(
    d: int,
    alpha: float,
    m: int,
    t: Sequence[Sequence[float]],
    n: int = DEFAULT_NODES,
) -> float:
    """
    E^m_{d,alpha}(t) = integral over x, y in [-1, 1]^d of prod_i |x - y + t_i|^{-alpha}.

    Raises:
        KernelError: If m alpha >= d or the shift list does not have m entries
    """
    shifts = np.asarray(t, dtype=float).reshape(-1, d) if len(t) else np.zeros((0, d))
    if shifts.shape[0] != m:
        raise KernelError(f"expected {m} shifts, got {shifts.shape[0]}")
    if m * alpha >= d:
        raise KernelError(f"E^m diverges when m * alpha >= d; got m={m}, alpha={alpha}, d={d}")
    f = _kernel_integrand(alpha, shifts)
    singular = [(-shift, alpha) for shift in shifts if np.all(np.abs(shift) <= 2.0)]
    return singular_integral(f, [-2.0] * d, [2.0] * d, singular, breaks=[0.0], n=n)


def e_boundary_constant(d: int, alpha: float, n: int = DEFAULT_NODES) -> float:
    """
    E-bar_{d,alpha} = integral over x, y in the boundary of [-1, 1]^d of |x - y|^{-alpha}.

    Face pairs split into equal faces (E_{d-1,alpha}), opposite faces (distance
    2, smooth) and adjacent faces, whose pair integral reduces to
    integral over p, q in [0, 2] and w in [-2, 2]^{d-2} of S_{d-2}(w) |(p, q, w)|^{-alpha}.

    Raises:
        KernelError: If d < 2 or alpha >= d - 1
    """
    if d < 2:
        raise KernelError("the cube boundary needs d >= 2")
    if not 0.0 <= alpha < d - 1:
        raise KernelError(f"boundary constant diverges unless 0 <= alpha < d - 1; got alpha={alpha}")
    same = e_constant(d - 1, alpha, n=n)

    def opposite_integrand(w: np.ndarray) -> np.ndarray:
        return cube_autocorrelation(w) * (4.0 + (w**2).sum(axis=1)) ** (-alpha / 2)

    opposite = singular_integral(opposite_integrand, [-2.0] * (d - 1), [2.0] * (d - 1), breaks=[0.0], n=n)

    def adjacent_integrand(u: np.ndarray) -> np.ndarray:
        weight = cube_autocorrelation(u[:, 2:]) if d > 2 else 1.0
        return weight * np.linalg.norm(u, axis=1) ** (-alpha)

    adjacent = singular_integral(
        adjacent_integrand,
        [0.0, 0.0] + [-2.0] * (d - 2),
        [2.0, 2.0] + [2.0] * (d - 2),
        [(np.zeros(d), alpha)],
        breaks=[0.0],
        n=n,
    )
    faces = 2 * d
    return faces * (same + opposite + (faces - 2) * adjacent)


def e_log_constant(d: int) -> float:
    """Constant of sum over x, y in Lambda_R of |x - y|^{-d} ~ E_{d,d} R^d log R: 2^d |S^{d-1}|."""
    return 2.0**d * 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def normalization(d: int, k: int, alpha: int | None = None) -> tuple[int, int]:
    """(p, q) with Var-type kernel sums growing like R^p (log R)^q, alpha = d - 2 for G."""
    alpha = d - 2 if alpha is None else alpha
    if k * alpha < d:
        return 2 * d - k * alpha, 0
    if k * alpha == d:
        return d, 1
    return d, 0


def _lag_grid(d: int, reach: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-negative lags in [0, reach]^d and the number of sign patterns mapping to each."""
    axis = np.arange(reach + 1)
    grid = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return grid, 2.0 ** (grid > 0).sum(axis=1)


def kernel_pair_sum(model: CovarianceModel, R: int, k: int) -> float:
    """sum over x, y in Lambda_R of K(x - y)^k through difference counts."""
    lags, multiplicity = _lag_grid(model.d, 2 * R)
    counts = np.prod(2 * R + 1 - lags, axis=1).astype(float)
    values = model.kernel(lags) ** k
    return math.fsum(multiplicity * counts * values)


def richardson(R_list: Sequence[int], values: Sequence[float], order: int = 2) -> tuple[float, float]:
    """
    Fit values ~ L + a_1/R + ... + a_order/R^order and return (L, rms residual).

    Raises:
        ExtrapolationError: With fewer than two points
    """
    R = np.asarray(R_list, dtype=float)
    y = np.asarray(values, dtype=float)
    if R.size < 2:
        raise ExtrapolationError("extrapolation needs at least two box sizes")
    order = min(order, R.size - 1)
    design = np.stack([R ** (-j) for j in range(order + 1)], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = float(np.sqrt(np.mean((design @ coef - y) ** 2)))
    return float(coef[0]), residual


def beta_constant(d: int, k: int, R_list: Sequence[int], model: CovarianceModel | None = None) -> KernelSumResult:
    """
    beta_{d,k} as the normalized limit of sum over x, y in Lambda_R of G(x - y)^k.

    The normalization is R^{max(2d - k(d-2), d)} (log R)^{1[k(d-2) = d]}.

    Raises:
        KernelError: If R_list is empty
    """
    R_list = sorted(int(R) for R in R_list)
    if not R_list:
        raise KernelError("beta_constant needs at least one box size")
    model = model or CovarianceModel.gff(d)
    p, q = normalization(d, k)
    raw = [kernel_pair_sum(model, R, k) for R in R_list]
    normalized = [s / (R**p * math.log(R) ** q) for s, R in zip(raw, R_list)]
    if len(R_list) >= 2:
        extrapolated, residual = richardson(R_list, normalized)
    else:
        extrapolated, residual = normalized[0], float("nan")
    slopes = [
        math.log(raw[i + 1] / raw[i]) / math.log(R_list[i + 1] / R_list[i]) for i in range(len(R_list) - 1)
    ]
    logger.info("beta_(%d,%d): normalization R^%d (log R)^%d, limit %.6g", d, k, p, q, extrapolated)
    return KernelSumResult("beta", d, k, R_list, raw, p, q, normalized, extrapolated, residual, slopes)


def beta_reference(d: int, k: int) -> float:
    """Continuum prediction c_d^k E_{d,k(d-2)} for k(d-2) < d."""
    c_d, alpha = asymptotic_constant(d)
    if k * alpha >= d:
        raise KernelError("the continuum prediction needs k(d-2) < d")
    return c_d**k * e_constant(d, k * alpha)


def _rectangle(R: int, offsets: Sequence[Sequence[int]], d: int) -> tuple[np.ndarray, np.ndarray]:
    """Range of x_1 such that x_1 + o stays in Lambda_R for every offset o."""
    o = np.asarray(offsets, dtype=np.int64).reshape(-1, d)
    return -R - o.min(axis=0), R - o.max(axis=0)


def weighted_kernel_sum(
    model: CovarianceModel,
    table: dict[tuple[tuple[int, ...], ...], float],
    m: int,
    R: int,
    t_shift: Sequence[Sequence[float]] | None = None,
) -> float:
    """
    sum over x, y in (Lambda_R)^m of prod_i K(x_i - y_i + s_i) P(x) P(y).

    ``table`` maps ordered offset tuples (o_1 = 0, o_2, ..., o_m) to P of the
    stationary point tuples (x_1 + o_1, ..., x_1 + o_m). The optional shifts
    s_i are round(t_i R).
    """
    d = model.d
    shifts = (
        np.zeros((m, d), dtype=np.int64)
        if t_shift is None
        else np.rint(np.asarray(t_shift, dtype=float).reshape(m, d) * R).astype(np.int64)
    )
    entries = [(np.asarray(o, dtype=np.int64).reshape(m, d), float(p)) for o, p in table.items() if p != 0.0]
    total = []
    for ox, px in entries:
        lo_x, hi_x = _rectangle(R, ox, d)
        if np.any(lo_x > hi_x):
            continue
        for oy, py in entries:
            lo_y, hi_y = _rectangle(R, oy, d)
            if np.any(lo_y > hi_y):
                continue
            axes = [np.arange(lo_x[k] - hi_y[k], hi_x[k] - lo_y[k] + 1) for k in range(d)]
            lags = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
            upper = np.minimum(hi_x, hi_y + lags)
            lower = np.maximum(lo_x, lo_y + lags)
            counts = np.clip(upper - lower + 1, 0, None).prod(axis=1).astype(float)
            keep = counts > 0
            lags, counts = lags[keep], counts[keep]
            kernel = np.ones(lags.shape[0])
            for i in range(m):
                kernel *= model.kernel(lags + ox[i] - oy[i] + shifts[i])
            total.append(px * py * float(np.dot(counts, kernel)))
    return math.fsum(total)
