"""
Hermite polynomials, Wick products and Feynman diagrams for small Gaussian vectors.

Conventions are the probabilists' ones: H^alpha_K(x) = (-1)^|alpha| d^alpha phi_K(x) / phi_K(x)
for the centred Gaussian density phi_K with covariance K.
"""

import logging
import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from fractions import Fraction
from itertools import combinations_with_replacement, permutations, product
from numbers import Integral, Rational

import numpy as np
import sympy
from numpy.polynomial import hermite_e
from scipy import integrate, linalg, stats

from gfflab.core.config import get_settings
from gfflab.core.errors import NumericalError, UsageError
from gfflab.core.rng import replicate_stream

logger = logging.getLogger(__name__)

MultiIndex = tuple[int, ...]

GRAM_CONDITION_LIMIT = 1e12
REGRESSION_MAX_DIM = 8


class HermiteError(UsageError):
    """Invalid Hermite or Wick request."""

    pass


class SingularCovarianceError(NumericalError):
    """The covariance is not positive definite."""

    pass


class ChaosProjectionError(NumericalError):
    """The Wick-basis Gram matrix is too ill-conditioned to invert."""

    pass


def alpha_tilde(alpha: Sequence[int]) -> MultiIndex:
    """alpha_tilde_i = max(alpha_i - 1, 0)."""
    return tuple(max(int(a) - 1, 0) for a in alpha)


def multi_index_of(points: Sequence[int], dim: int) -> MultiIndex:
    """Multiplicity of each coordinate among ``points``."""
    counts = [0] * dim
    for p in points:
        counts[int(p)] += 1
    return tuple(counts)


def hermite_univariate(n: int, x):
    """
    Probabilists' Hermite polynomial He_n, vectorized over ``x``.

    Example:
        >>> float(hermite_univariate(2, 2.0))
        3.0
    """
    if n < 0:
        raise HermiteError(f"Hermite order must be non-negative, got {n}")
    coefficients = np.zeros(n + 1)
    coefficients[n] = 1.0
    return hermite_e.hermeval(x, coefficients)


def univariate_bound(n: int, y):
    """sqrt(n!) exp(sqrt(n) |y|), the classical pointwise bound on |He_n(y)|."""
    return math.sqrt(math.factorial(n)) * np.exp(math.sqrt(n) * np.abs(y))


def _is_exact(entries) -> bool:
    return all(isinstance(v, (Integral, Rational, sympy.Rational)) and not isinstance(v, bool) for v in entries)


def _to_fraction(v) -> Fraction:
    if isinstance(v, sympy.Rational):
        return Fraction(int(v.p), int(v.q))
    if isinstance(v, Fraction):
        return v
    return Fraction(int(v))


def _flat_entries(cov) -> list:
    if isinstance(cov, sympy.MatrixBase):
        return list(cov)
    return [v for row in cov for v in row]


def _precision_numeric(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    try:
        linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError as e:
        raise SingularCovarianceError("covariance is not positive definite") from e
    return linalg.inv(cov)


def _check_order(alpha: Sequence[int]) -> None:
    cap = get_settings().hermite_order_cap
    if any(a < 0 for a in alpha):
        raise HermiteError(f"multi-index entries must be non-negative: {tuple(alpha)}")
    if sum(alpha) > cap:
        raise HermiteError(f"|alpha| = {sum(alpha)} exceeds the configured order cap {cap}")


def hermite_multivariate(cov, alpha: Sequence[int], x) -> np.ndarray:
    """
    Evaluate H^alpha_K at points ``x`` (shape (..., k)).

    Uses H^{alpha+e_i} = (Qx)_i H^alpha - sum_j Q_ij alpha_j H^{alpha-e_j} with Q = K^{-1}.

    Raises:
        SingularCovarianceError: If ``cov`` is not positive definite
        HermiteError: If |alpha| exceeds the configured cap
    """
    alpha = tuple(int(a) for a in alpha)
    _check_order(alpha)
    precision = _precision_numeric(np.asarray(cov, dtype=float))
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != len(alpha):
        raise HermiteError("point dimension does not match the multi-index")
    return _hermite_table(precision, x, alpha)[alpha]


def _hermite_table(precision: np.ndarray, x: np.ndarray, target: MultiIndex) -> dict[MultiIndex, np.ndarray]:
    k = len(target)
    qx = x @ precision.T
    zero = (0,) * k
    table: dict[MultiIndex, np.ndarray] = {zero: np.ones(x.shape[:-1])}
    # build along a fixed path of increments; each step only needs alpha - e_j entries
    order = sorted(
        (a for a in product(*(range(t + 1) for t in target))), key=lambda a: (sum(a), a)
    )
    for a in order[1:]:
        i = next(j for j in range(k) if a[j] > 0)
        base = a[:i] + (a[i] - 1,) + a[i + 1 :]
        value = qx[..., i] * table[base]
        for j in range(k):
            if base[j] > 0:
                lower = base[:j] + (base[j] - 1,) + base[j + 1 :]
                value = value - precision[i, j] * base[j] * table[lower]
        table[a] = value
    return table


def hermite_polynomial(cov, alpha: Sequence[int]) -> tuple[sympy.Expr, tuple[sympy.Symbol, ...]]:
    """
    H^alpha_K as a sympy polynomial in symbols x0..x{k-1}.

    Coefficients are exact rationals when every covariance entry is an int,
    Fraction or sympy Rational; floating otherwise.
    """
    alpha = tuple(int(a) for a in alpha)
    _check_order(alpha)
    entries = _flat_entries(cov)
    k = len(alpha)
    if _is_exact(entries):
        matrix = sympy.Matrix(k, k, [sympy.sympify(v) for v in entries])
        if not matrix.is_positive_definite:
            raise SingularCovarianceError("covariance is not positive definite")
        precision = matrix.inv()
    else:
        precision = sympy.Matrix(_precision_numeric(np.array(entries, dtype=float).reshape(k, k)))
    symbols = sympy.symbols(f"x0:{k}")
    qx = precision * sympy.Matrix(symbols)
    expr = sympy.Integer(1)
    for i, a in enumerate(alpha):
        for _ in range(a):
            expr = sympy.expand(qx[i] * expr - sympy.diff(expr, symbols[i]))
    return expr, symbols


def hermite_bound(cov, alpha: Sequence[int], x) -> np.ndarray:
    """
    Explicit pointwise bound on |H^alpha_K(x)|.

    k^{p/2} lambda_min^{-p/2} sqrt(p!) exp(sqrt(p) sqrt(k / lambda_min) ||x||_2)
    with p = |alpha| and k = dim K; this is the dim^{p/2} sqrt(p!) e^{c sqrt(p)(||x|| + 1)}
    form with c depending only on lambda_min.
    """
    cov = np.asarray(cov, dtype=float)
    k = cov.shape[0]
    p = int(sum(alpha))
    lam = float(linalg.eigvalsh(cov)[0])
    if lam <= 0:
        raise SingularCovarianceError("covariance is not positive definite")
    norm = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
    return (k / lam) ** (p / 2) * math.sqrt(math.factorial(p)) * np.exp(math.sqrt(p) * math.sqrt(k / lam) * norm)


@dataclass
class BoundCheck:
    cases: int
    violations: int
    worst_ratio: float


def hermite_bound_check(
    rng: np.random.Generator,
    cases: int = 10_000,
    dim: int = 3,
    max_order: int = 6,
    univariate_orders: int = 30,
    univariate_radius: float = 5.0,
) -> tuple[BoundCheck, BoundCheck]:
    """
    Check the univariate bound on a grid and the multivariate bound on random cases.

    Returns:
        (univariate result, multivariate result)
    """
    grid = np.linspace(-univariate_radius, univariate_radius, 201)
    worst_uni = 0.0
    uni_violations = 0
    for n in range(univariate_orders + 1):
        ratio = np.abs(hermite_univariate(n, grid)) / univariate_bound(n, grid)
        uni_violations += int(np.count_nonzero(ratio > 1 + 1e-12))
        worst_uni = max(worst_uni, float(ratio.max()))

    worst = 0.0
    violations = 0
    for _ in range(cases):
        a = rng.standard_normal((dim, dim))
        cov = a @ a.T + 0.2 * np.eye(dim)
        alpha = tuple(int(v) for v in rng.multinomial(int(rng.integers(0, max_order + 1)), [1 / dim] * dim))
        x = rng.normal(scale=2.0, size=dim)
        ratio = abs(float(hermite_multivariate(cov, alpha, x))) / float(hermite_bound(cov, alpha, x))
        violations += int(ratio > 1 + 1e-9)
        worst = max(worst, ratio)
    return (
        BoundCheck(len(grid) * (univariate_orders + 1), uni_violations, worst_uni),
        BoundCheck(cases, violations, worst),
    )


def _partial_matchings(n: int) -> Iterator[tuple[tuple[int, int], ...]]:
    """All partial matchings of range(n), each pair (a, b) with a < b."""

    def extend(free: tuple[int, ...]) -> Iterator[tuple[tuple[int, int], ...]]:
        if not free:
            yield ()
            return
        head, rest = free[0], free[1:]
        for tail in extend(rest):
            yield tail
        for j, partner in enumerate(rest):
            for tail in extend(rest[:j] + rest[j + 1 :]):
                yield ((head, partner),) + tail

    return extend(tuple(range(n)))


@dataclass
class WickPolynomial:
    """
    :X_{i_1} ... X_{i_n}: as a sparse polynomial over monomials in the coordinates.

    Attributes:
        dim: Dimension of the ambient Gaussian vector
        terms: MultiIndex of each monomial mapped to its coefficient
        covariance: The covariance the product is taken with respect to
        indices: The factors, as coordinate indices
    """

    dim: int
    terms: dict[MultiIndex, object]
    covariance: object
    indices: tuple[int, ...] = field(default=())

    @property
    def degree(self) -> int:
        return max((sum(m) for m, c in self.terms.items() if c != 0), default=0)

    def as_expr(self) -> sympy.Expr:
        symbols = sympy.symbols(f"x0:{self.dim}")
        return sympy.Add(
            *(sympy.sympify(c) * sympy.Mul(*(s**e for s, e in zip(symbols, m))) for m, c in self.terms.items())
        )

    def __call__(self, samples: np.ndarray) -> np.ndarray:
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        total = np.zeros(samples.shape[0])
        for m, c in self.terms.items():
            total += float(c) * np.prod(samples ** np.asarray(m), axis=1)
        return total


def wick_polynomial(cov, indices: Sequence[int]) -> WickPolynomial:
    """
    Expand a Wick product as sum over partial matchings M of (-1)^|M| prod K prod x.

    Repeated indices are allowed; ``:X_1 X_1:`` is ``x_1^2 - K_11``.

    Example:
        >>> w = wick_polynomial([[1, 0], [0, 1]], [0, 1])
        >>> w.as_expr()
        x0*x1
    """
    entries = _flat_entries(cov)
    exact = _is_exact(entries)
    dim = int(round(math.sqrt(len(entries))))
    indices = tuple(int(i) for i in indices)
    if any(i < 0 or i >= dim for i in indices):
        raise HermiteError(f"indices {indices} out of range for dimension {dim}")
    if exact:
        K = [[_to_fraction(entries[a * dim + b]) for b in range(dim)] for a in range(dim)]
        one = Fraction(1)
    else:
        K = np.array(entries, dtype=float).reshape(dim, dim).tolist()
        one = 1.0
    terms: dict[MultiIndex, object] = {}
    for matching in _partial_matchings(len(indices)):
        coefficient = one if len(matching) % 2 == 0 else -one
        used = set()
        for a, b in matching:
            coefficient *= K[indices[a]][indices[b]]
            used.update((a, b))
        monomial = multi_index_of([indices[p] for p in range(len(indices)) if p not in used], dim)
        terms[monomial] = terms.get(monomial, 0 * one) + coefficient
    terms = {m: c for m, c in terms.items() if c != 0}
    return WickPolynomial(dim=dim, terms=terms, covariance=cov, indices=indices)


def wick_product_values(cov, indices: Sequence[int], samples: np.ndarray) -> np.ndarray:
    """
    Numeric Wick products on samples (n, dim) by the recursion
    :X Y_1...Y_k: = X :Y_1...Y_k: - sum_j K(X, Y_j) :Y_1..(no Y_j)..Y_k:.
    """
    K = np.asarray(cov, dtype=float)
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    indices = tuple(int(i) for i in indices)
    memo: dict[tuple[int, ...], np.ndarray] = {}

    def value(idx: tuple[int, ...]) -> np.ndarray:
        if idx in memo:
            return memo[idx]
        if not idx:
            out = np.ones(samples.shape[0])
        else:
            head, rest = idx[0], idx[1:]
            out = samples[:, head] * value(rest)
            for j, other in enumerate(rest):
                out = out - K[head, other] * value(rest[:j] + rest[j + 1 :])
        memo[idx] = out
        return out

    return value(indices)


@dataclass
class DiagramSet:
    """
    Complete Feynman diagrams on rows of vertices with no intra-row edge.

    Vertices are numbered row by row; each diagram is a tuple of (a, b) pairs.
    """

    row_sizes: tuple[int, ...]
    diagrams: list[tuple[tuple[int, int], ...]]
    odd_total: bool = False

    @property
    def row_of(self) -> list[int]:
        return [r for r, size in enumerate(self.row_sizes) for _ in range(size)]

    def __len__(self) -> int:
        return len(self.diagrams)


def enumerate_diagrams(row_sizes: Sequence[int]) -> DiagramSet:
    """
    All perfect matchings of the vertices with no edge inside a row.

    An odd vertex total gives an empty set with ``odd_total`` set.

    Example:
        >>> len(enumerate_diagrams([4, 4]))
        24
    """
    row_sizes = tuple(int(s) for s in row_sizes)
    if any(s < 0 for s in row_sizes):
        raise HermiteError("row sizes must be non-negative")
    if sum(row_sizes) % 2:
        return DiagramSet(row_sizes, [], odd_total=True)
    return DiagramSet(row_sizes, list(_diagrams(row_sizes)))


@lru_cache(maxsize=256)
def _diagrams(row_sizes: tuple[int, ...]) -> tuple[tuple[tuple[int, int], ...], ...]:
    row_of = [r for r, size in enumerate(row_sizes) for _ in range(size)]

    def extend(free: tuple[int, ...]) -> Iterator[tuple[tuple[int, int], ...]]:
        if not free:
            yield ()
            return
        head, rest = free[0], free[1:]
        for j, partner in enumerate(rest):
            if row_of[partner] == row_of[head]:
                continue
            for tail in extend(rest[:j] + rest[j + 1 :]):
                yield ((head, partner),) + tail

    return tuple(extend(tuple(range(len(row_of)))))


def wick_moment(cov, rows: Sequence[Sequence[int]]) -> float:
    """
    E[:row_1: ... :row_I:] as the sum over admissible diagrams of edge covariances.
    """
    if not rows:
        raise HermiteError("need at least one row")
    K = np.asarray(cov, dtype=float)
    labels = np.asarray([int(i) for row in rows for i in row], dtype=np.int64)
    if labels.size == 0:
        return 1.0
    diagrams = enumerate_diagrams([len(row) for row in rows])
    if not diagrams.diagrams:
        return 0.0
    pairs = np.array(diagrams.diagrams, dtype=np.int64)
    a = labels[pairs[:, :, 0]]
    b = labels[pairs[:, :, 1]]
    return float(math.fsum(np.prod(K[a, b], axis=1)))


class SmoothFunctional:
    """
    A functional of a Gaussian vector that can report E[d^m Phi(X)] exactly.

    Subclasses implement ``__call__`` on samples (n, dim) and
    ``expected_derivative_tensor(cov, m)`` returning a symmetric dim^m array.
    """

    def __call__(self, samples: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def expected_derivative_tensor(self, cov: np.ndarray, m: int) -> np.ndarray:
        raise NotImplementedError


class LinearFunctional(SmoothFunctional):
    def __init__(self, weights: Sequence[float]):
        self.weights = np.asarray(weights, dtype=float)

    def __call__(self, samples: np.ndarray) -> np.ndarray:
        return np.atleast_2d(samples) @ self.weights

    def expected_derivative_tensor(self, cov: np.ndarray, m: int) -> np.ndarray:
        dim = self.weights.size
        if m == 1:
            return self.weights.copy()
        return np.zeros((dim,) * m)


class HermiteOfCoordinate(SmoothFunctional):
    """Phi(x) = H_n(x_i / sigma_i) for one coordinate."""

    def __init__(self, coordinate: int, order: int):
        self.coordinate = coordinate
        self.order = order

    def __call__(self, samples: np.ndarray) -> np.ndarray:
        return hermite_univariate(self.order, np.atleast_2d(samples)[:, self.coordinate])

    def expected_derivative_tensor(self, cov: np.ndarray, m: int) -> np.ndarray:
        dim = np.asarray(cov).shape[0]
        tensor = np.zeros((dim,) * m)
        if m == self.order:
            tensor[(self.coordinate,) * m] = float(math.factorial(m))
        return tensor


class QuadrantFunctional(SmoothFunctional):
    """
    Smoothed orthant indicator Phi^eps(x) = P(x + eps Z > 0 componentwise).

    Expected derivatives use Gaussian integration by parts:
    E[d^alpha Phi^eps(X)] = E[1{W > 0} H^alpha_S(W)] with W ~ N(0, S), S = K + eps^2 I.
    """

    def __init__(self, epsilon: float):
        if epsilon <= 0:
            raise HermiteError("the smoothing scale must be positive")
        self.epsilon = epsilon

    def __call__(self, samples: np.ndarray) -> np.ndarray:
        samples = np.atleast_2d(samples)
        return np.prod(stats.norm.cdf(samples / self.epsilon), axis=1)

    def expected_derivative_tensor(self, cov: np.ndarray, m: int) -> np.ndarray:
        cov = np.asarray(cov, dtype=float)
        dim = cov.shape[0]
        if dim > 3:
            raise HermiteError("quadrant oracle integrates numerically and supports dim <= 3")
        smoothed = cov + self.epsilon**2 * np.eye(dim)
        law = stats.multivariate_normal(np.zeros(dim), smoothed)
        precision = _precision_numeric(smoothed)
        tensor = np.zeros((dim,) * m)
        for idx in combinations_with_replacement(range(dim), m):
            alpha = multi_index_of(idx, dim)

            def integrand(*w, alpha=alpha):
                point = np.asarray(w)
                return float(_hermite_table(precision, point[None, :], alpha)[alpha][0]) * law.pdf(point)

            value, _ = integrate.nquad(integrand, [(0, np.inf)] * dim, opts={"epsabs": 1e-10})
            for perm in set(permutations(idx)):
                tensor[perm] = value
        return tensor


@dataclass
class ChaosProjection:
    """
    The order-m chaos component in the Wick basis.

    Attributes:
        order: m
        basis: Index multisets; entry b stands for :X_{b_1} ... X_{b_m}:
        coefficients: Coefficient of each basis element
        variance: Var[Q_m]
        method: "smooth" or "regression"
        condition_number: Gram-matrix condition number (regression only)
        samples: Monte Carlo sample count used (regression only)
    """

    order: int
    basis: list[tuple[int, ...]]
    coefficients: np.ndarray
    variance: float
    method: str
    condition_number: float = 1.0
    samples: int = 0

    def evaluate(self, cov, points: np.ndarray) -> np.ndarray:
        total = np.zeros(np.atleast_2d(points).shape[0])
        for b, c in zip(self.basis, self.coefficients):
            total += c * wick_product_values(cov, b, points)
        return total


def wick_gram(cov, basis: Sequence[tuple[int, ...]]) -> np.ndarray:
    """Gram matrix E[:b_i: :b_j:] of a Wick basis."""
    gram = np.empty((len(basis), len(basis)))
    for i, a in enumerate(basis):
        for j in range(i, len(basis)):
            gram[i, j] = gram[j, i] = wick_moment(cov, [a, basis[j]])
    return gram


def chaos_project(
    cov,
    functional: Callable[[np.ndarray], np.ndarray] | SmoothFunctional,
    m: int,
    n: int = 100_000,
    rng: np.random.Generator | None = None,
    method: str = "auto",
) -> ChaosProjection:
    """
    Project a functional of X ~ N(0, cov) onto the m-th chaos.

    The smooth path uses Q_m = (1/m!) sum T_{i_1..i_m} :X_{i_1}...X_{i_m}: with
    T = E[d^m Phi(X)]. The regression path solves Gram c = E[:b: Phi(X)] on
    Monte Carlo samples over the (non-orthogonal) Wick monomial basis.
    Without ``rng`` the samples come from the master-seed stream keyed by
    (m, dim), so repeated calls agree.

    Raises:
        ChaosProjectionError: If the Gram matrix is too ill-conditioned
        HermiteError: On unsupported order or dimension
    """
    cov = np.asarray(cov, dtype=float)
    dim = cov.shape[0]
    cap = get_settings().hermite_order_cap
    if m < 0 or m > cap:
        raise HermiteError(f"chaos order must be in [0, {cap}], got {m}")
    basis = list(combinations_with_replacement(range(dim), m))
    use_smooth = method == "smooth" or (method == "auto" and isinstance(functional, SmoothFunctional))
    if use_smooth:
        if not isinstance(functional, SmoothFunctional):
            raise HermiteError("the smooth path needs expected derivatives")
        tensor = functional.expected_derivative_tensor(cov, m)
        coefficients = np.array(
            [tensor[b] * math.factorial(m) / math.prod(math.factorial(c) for c in multi_index_of(b, dim))
             for b in basis]
        ) / math.factorial(m)
        contracted = tensor
        for _ in range(m):
            contracted = np.tensordot(contracted, cov, axes=([0], [0]))
        # Q_0 is the constant E[Phi]
        variance = float(np.sum(contracted * tensor)) / math.factorial(m) if m else 0.0
        return ChaosProjection(m, basis, coefficients, variance, "smooth")

    if dim > REGRESSION_MAX_DIM:
        raise HermiteError(f"regression projection supports dim <= {REGRESSION_MAX_DIM}")
    if rng is None:
        rng = replicate_stream(get_settings().seed, m, dim)
    chol = linalg.cholesky(cov, lower=True)
    points = rng.standard_normal((n, dim)) @ chol.T
    values = np.asarray(functional(points), dtype=float)
    design = np.column_stack([wick_product_values(cov, b, points) for b in basis])
    gram = wick_gram(cov, basis)
    condition = float(np.linalg.cond(gram))
    if condition > GRAM_CONDITION_LIMIT:
        raise ChaosProjectionError(f"Wick Gram matrix condition number {condition:.3e} is too large")
    moments = design.T @ values / n
    coefficients = linalg.solve(gram, moments, assume_a="pos")
    variance = float(coefficients @ gram @ coefficients) if m else 0.0
    logger.debug("Projected order %d on %d samples, cond=%.2e", m, n, condition)
    return ChaosProjection(m, basis, coefficients, variance, "regression", condition, n)


def _theta_sum(A: np.ndarray, rows: tuple[int, ...], cols: tuple[int, ...]) -> float:
    """Sum over non-negative integer matrices theta with the given margins of A^theta / theta!."""

    @lru_cache(maxsize=None)
    def fill(r: int, remaining: tuple[int, ...]) -> float:
        if r == len(rows):
            return 1.0 if not any(remaining) else 0.0
        total = 0.0
        for choice in _compositions(rows[r], remaining):
            weight = 1.0
            for c, t in enumerate(choice):
                if t:
                    weight *= A[r, c] ** t / math.factorial(t)
            total += weight * fill(r + 1, tuple(m - t for m, t in zip(remaining, choice)))
        return total

    if sum(rows) != sum(cols):
        return 0.0
    return fill(0, tuple(cols))


def _compositions(total: int, caps: tuple[int, ...]) -> Iterator[tuple[int, ...]]:
    if not caps:
        if total == 0:
            yield ()
        return
    for first in range(min(total, caps[0]) + 1):
        for rest in _compositions(total - first, caps[1:]):
            yield (first,) + rest


def conditional_hermite_moment(
    cov,
    n_conditioned: int,
    alpha_I: Sequence[int],
    alpha_J: Sequence[int],
    alpha_I_prime: Sequence[int],
    alpha_J_prime: Sequence[int],
    x: Sequence[float],
) -> float:
    """
    E[H^{alpha_I, alpha_J}(x, Y) H^{alpha'_I, alpha'_J}(x, Y) | X = x] for (X, Y) ~ N(0, cov).

    The first ``n_conditioned`` coordinates of ``cov`` are X, the rest Y. Both
    Hermite polynomials are taken with respect to the joint covariance. The
    value is the sum over alpha_hat <= alpha_I, alpha_hat' <= alpha'_I and
    margin-constrained integer matrices theta of the joint precision raised
    to theta, times H^{bar alpha}_X(x).
    """
    cov = np.asarray(cov, dtype=float)
    k = int(n_conditioned)
    dim = cov.shape[0]
    if dim > 5:
        raise HermiteError("conditional Hermite moments support dim <= 5")
    aI, aJ = tuple(alpha_I), tuple(alpha_J)
    bI, bJ = tuple(alpha_I_prime), tuple(alpha_J_prime)
    if len(aI) != k or len(bI) != k or len(aJ) != dim - k or len(bJ) != dim - k:
        raise HermiteError("multi-index lengths do not match the partition")
    precision = _precision_numeric(cov)
    cov_x = cov[:k, :k]
    x = np.asarray(x, dtype=float)
    prefactor = math.prod(math.factorial(a) for a in aI + aJ + bI + bJ)
    total = 0.0
    for hat in product(*(range(a + 1) for a in aI)):
        for hat_p in product(*(range(b + 1) for b in bI)):
            if sum(hat) + sum(aJ) != sum(hat_p) + sum(bJ):
                continue
            theta = _theta_sum(precision, tuple(hat) + aJ, tuple(hat_p) + bJ)
            if theta == 0.0:
                continue
            denominator = math.prod(math.factorial(a - h) for a, h in zip(aI, hat)) * math.prod(
                math.factorial(b - h) for b, h in zip(bI, hat_p)
            )
            bar = tuple(a - h + b - hp for a, h, b, hp in zip(aI, hat, bI, hat_p))
            h_x = float(hermite_multivariate(cov_x, bar, x)) if k else 1.0
            total += prefactor / denominator * theta * h_x
    return total
