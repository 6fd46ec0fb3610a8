"""
Green's function of simple random walk and covariance models.

G(x) is evaluated through the heat-kernel representation

    G(x) = integral_0^inf prod_i exp(-t/d) I_{x_i}(t/d) dt,

which is the Fourier (Watson) integral with the angular variables
integrated out. The integral is split at a large time T: the bulk uses
composite Gauss-Legendre on a logarithmic time grid, and the t^{-d/2} tail
is integrated term by term from the large-argument expansion of the
modified Bessel functions. Values are cached by sorted absolute
coordinates.
"""

import logging
import math
import threading
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from numpy.polynomial import legendre
from numpy.polynomial import polynomial as P
from scipy import linalg, special
from scipy.sparse import diags, identity, kron
from scipy.sparse.linalg import cg

from gfflab.core.config import get_settings
from gfflab.core.errors import NumericalError, UsageError

logger = logging.getLogger(__name__)


class GreenFunctionError(UsageError):
    """Invalid Green's function or covariance request."""

    pass


class CovarianceError(NumericalError):
    """An assembled covariance matrix is not positive definite."""

    pass


def asymptotic_constant(d: int) -> tuple[float, int]:
    """
    Return (c_d, alpha) with G(x) ~ c_d |x|^{-alpha}, alpha = d - 2.

    c_d = (d/2) Gamma(d/2 - 1) pi^{-d/2}; for d = 3 this is 3/(2 pi).
    """
    if d < 3:
        raise GreenFunctionError(f"simple random walk is recurrent in d={d}; G diverges")
    c_d = 0.5 * d * math.gamma(0.5 * d - 1.0) * math.pi ** (-0.5 * d)
    return c_d, d - 2


def hopping_symbol(theta: np.ndarray) -> np.ndarray:
    """phi(theta) = (1/d) sum_i cos(theta_i), vectorized over the last axis."""
    theta = np.asarray(theta, dtype=float)
    return np.cos(theta).mean(axis=-1)


def spectral_density(d: int, theta: Sequence[float] | np.ndarray) -> float | np.ndarray:
    """
    Spectral density (2 pi)^{-d} / (1 - phi(theta)) of the GFF.

    Raises:
        GreenFunctionError: At the pole theta = 0 (mod 2 pi)
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != d:
        raise GreenFunctionError(f"theta must have {d} components")
    gap = 1.0 - hopping_symbol(theta)
    if np.any(gap <= 0.0):
        raise GreenFunctionError("spectral density has a pole at theta = 0")
    value = (2.0 * np.pi) ** (-d) / gap
    return float(value) if np.ndim(value) == 0 else value


def iid_floor(d: int) -> float:
    """kappa^2 = min over the torus of (2 pi)^d times the spectral density (= 1/2)."""
    return float((2.0 * np.pi) ** d * spectral_density(d, np.full(d, np.pi)))


def _bessel_tail_coefficients(n: int, order: int) -> np.ndarray:
    """Coefficients b_k of ive(n, z) ~ (2 pi z)^{-1/2} sum_k b_k z^{-k}."""
    coeffs = np.empty(order + 1)
    acc = 1.0
    coeffs[0] = 1.0
    mu = 4.0 * n * n
    for k in range(1, order + 1):
        acc *= -(mu - (2 * k - 1) ** 2) / (8.0 * k)
        coeffs[k] = acc
    return coeffs


DEFAULT_TOL = 1e-10
TOL_FLOOR = 1e-13


@lru_cache(maxsize=None)
def _gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    return legendre.leggauss(n)


class GreenFunctionService:
    """
    Quadrature evaluator of G on Z^d with a thread-safe value cache.

    The bulk rule is refined by doubling the nodes per panel until two
    successive values agree to the requested relative tolerance.

    Attributes:
        d: Dimension (>= 3)
        nodes_per_panel: Nodes in each unit panel of log-time for the first pass
        max_nodes_per_panel: Refinement stops here
        tail_order: Terms of the Bessel large-argument expansion in the tail
        switch_radius: Sup-norm radius beyond which ``evaluate`` uses the asymptotic
    """

    T_SCALE = 200.0
    T_START = 1e-12

    def __init__(
        self,
        d: int,
        nodes_per_panel: int = 20,
        tail_order: int = 8,
        switch_radius: int | None = None,
        max_nodes_per_panel: int = 160,
    ):
        self.c_d, self.alpha = asymptotic_constant(d)
        self.d = d
        self.nodes_per_panel = nodes_per_panel
        self.max_nodes_per_panel = max_nodes_per_panel
        self.tail_order = tail_order
        self.switch_radius = (
            switch_radius if switch_radius is not None else get_settings().green_switch_radius
        )
        # key -> (value, relative change at the last refinement)
        self._cache: dict[tuple[int, ...], tuple[float, float]] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _key(x: Sequence[int]) -> tuple[int, ...]:
        return tuple(sorted(abs(int(c)) for c in x))

    def _bulk(self, key: tuple[int, ...], t_end: float, nodes_per_panel: int) -> float:
        nodes, weights = _gauss_legendre(nodes_per_panel)
        v0, v1 = math.log(self.T_START), math.log(t_end)
        n_panels = max(1, math.ceil(v1 - v0))
        edges = np.linspace(v0, v1, n_panels + 1)
        half = 0.5 * (edges[1:] - edges[:-1])
        mid = 0.5 * (edges[1:] + edges[:-1])
        v = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
        w = (half[:, None] * weights[None, :]).ravel()
        t = np.exp(v)
        integrand = t.copy()
        for n in key:
            integrand *= special.ive(n, t / self.d)
        head = self.T_START * float(all(n == 0 for n in key))
        return float(np.dot(w, integrand)) + head

    def _tail(self, key: tuple[int, ...], t_end: float) -> float:
        series = np.array([1.0])
        for n in key:
            series = P.polymul(series, _bessel_tail_coefficients(n, self.tail_order))[
                : self.tail_order + 1
            ]
        # prod_i (2 pi t/d)^{-1/2} sum_k b_k (d/t)^k, integrated from t_end to infinity
        prefactor = (2.0 * math.pi / self.d) ** (-0.5 * self.d)
        total = 0.0
        for p, c in enumerate(series):
            power = 0.5 * self.d + p
            total += c * self.d**p * t_end ** (1.0 - power) / (power - 1.0)
        return prefactor * total

    def _compute(self, key: tuple[int, ...], tol: float) -> tuple[float, float]:
        t_end = self.T_SCALE * self.d * (1.0 + sum(n * n for n in key))
        tail = self._tail(key, t_end)
        nodes = self.nodes_per_panel
        previous = self._bulk(key, t_end, nodes) + tail
        while nodes < self.max_nodes_per_panel:
            nodes *= 2
            value = self._bulk(key, t_end, nodes) + tail
            if not math.isfinite(value) or value <= 0.0:
                break
            change = abs(value - previous) / value
            if change <= tol:
                return value, change
            previous = value
        raise NumericalError(f"Green's function quadrature did not reach tolerance {tol} at {key}")

    def value(self, x: Sequence[int], tol: float = DEFAULT_TOL) -> float:
        """G(x) by quadrature to relative tolerance ``tol`` (cached)."""
        if len(x) != self.d:
            raise GreenFunctionError(f"site {tuple(x)} is not {self.d}-dimensional")
        key = self._key(x)
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None and cached[1] <= tol:
            return cached[0]
        value, change = self._compute(key, tol)
        with self._lock:
            self._cache[key] = (value, change)
        return value

    def asymptotic(self, lags: np.ndarray) -> np.ndarray:
        """
        Large-|x| expansion of G.

        In d = 3 the expansion carries the cubic-harmonic corrections of
        order |x|^{-3} and |x|^{-5}; otherwise only the leading term.
        """
        lags = np.asarray(lags, dtype=float)
        r2 = (lags**2).sum(axis=-1)
        r = np.sqrt(r2)
        with np.errstate(divide="ignore"):
            value = self.c_d * r ** (-self.alpha)
            if self.d == 3:
                n1, n2, n3 = lags[..., 0] ** 2, lags[..., 1] ** 2, lags[..., 2] ** 2
                quartic = n1**2 + n2**2 + n3**2 - 3.0 * (n1 * n2 + n2 * n3 + n3 * n1)
                octic = (
                    23.0 * (n1**4 + n2**4 + n3**4)
                    - 244.0 * (n2**3 * n3 + n3**3 * n2 + n1**3 * n2 + n2**3 * n1 + n1**3 * n3 + n3**3 * n1)
                    + 621.0 * (n1**2 * n2**2 + n2**2 * n3**2 + n3**2 * n1**2)
                    - 228.0 * (n1**2 * n2 * n3 + n1 * n2**2 * n3 + n1 * n2 * n3**2)
                )
                value = value + 3.0 * quartic / (8.0 * np.pi * r**7) + 3.0 * octic / (64.0 * np.pi * r**13)
        return value

    def evaluate(self, lags: Iterable[Sequence[int]] | np.ndarray) -> np.ndarray:
        """
        G at an array of lags, shape (..., d).

        Lags with sup norm up to ``switch_radius`` use the quadrature cache;
        farther lags use the asymptotic expansion.
        """
        lags = np.asarray(lags, dtype=np.int64)
        if lags.shape[-1] != self.d:
            raise GreenFunctionError(f"lags must have {self.d} components")
        flat = np.abs(lags.reshape(-1, self.d))
        out = np.empty(flat.shape[0])
        near = flat.max(axis=1) <= self.switch_radius
        if near.any():
            keys = np.sort(flat[near], axis=1)
            uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
            values = np.array([self.value(tuple(row)) for row in uniq])
            out[near] = values[np.asarray(inverse).ravel()]
        if (~near).any():
            out[~near] = self.asymptotic(flat[~near])
        return out.reshape(lags.shape[:-1])


_services: dict[int, GreenFunctionService] = {}
_services_lock = threading.Lock()


def get_green_service(d: int) -> GreenFunctionService:
    """Shared per-dimension evaluator (one cache per process)."""
    with _services_lock:
        service = _services.get(d)
        if service is None:
            service = GreenFunctionService(d)
            _services[d] = service
        return service


def green_function(d: int, x: Sequence[int], tol: float = DEFAULT_TOL) -> float:
    """
    G(x) for simple random walk on Z^d.

    Args:
        d: Dimension, at least 3
        x: Lattice site
        tol: Relative tolerance of the quadrature refinement, at least 1e-13

    Returns:
        G(x), with G(0) = 1.516386... in d = 3

    Raises:
        GreenFunctionError: If d < 3 or tol is not attainable
    """
    if tol < TOL_FLOOR:
        raise GreenFunctionError(f"relative tolerance {tol} is below the quadrature floor {TOL_FLOOR}")
    if d < 3:
        raise GreenFunctionError(f"simple random walk is recurrent in d={d}; G diverges")
    return get_green_service(d).value(x, tol)


@dataclass(frozen=True)
class CovarianceModel:
    """
    A centred Gaussian covariance on lattice sites.

    Kinds:
        gff: K(x, y) = G(x - y) on Z^d
        iid: K = identity
        explicit: a fixed SPD matrix over a given site list

    Attributes:
        kind: One of "gff", "iid", "explicit"
        d: Dimension of the sites
        matrix: Covariance for the explicit kind
        sites: Site list indexing ``matrix`` for the explicit kind
    """

    kind: str
    d: int
    matrix: np.ndarray | None = field(default=None, compare=False, repr=False)
    sites: tuple[tuple[int, ...], ...] = ()

    @classmethod
    def gff(cls, d: int) -> "CovarianceModel":
        asymptotic_constant(d)
        return cls("gff", d)

    @classmethod
    def iid(cls, d: int) -> "CovarianceModel":
        return cls("iid", d)

    @classmethod
    def explicit(cls, matrix: np.ndarray, sites: Iterable[Sequence[int]]) -> "CovarianceModel":
        matrix = np.array(matrix, dtype=float)
        site_list = tuple(tuple(int(c) for c in s) for s in sites)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] != len(site_list):
            raise GreenFunctionError("explicit covariance must be square and match its site list")
        if len(set(site_list)) != len(site_list):
            raise GreenFunctionError("explicit covariance sites must be distinct")
        if not np.allclose(matrix, matrix.T, atol=1e-12):
            raise GreenFunctionError("explicit covariance must be symmetric")
        try:
            linalg.cholesky(matrix, lower=True)
        except linalg.LinAlgError as e:
            raise CovarianceError("explicit covariance is not positive definite") from e
        return cls("explicit", len(site_list[0]), matrix, site_list)

    @property
    def stationary(self) -> bool:
        return self.kind in ("gff", "iid")

    @cached_property
    def _explicit_index(self) -> dict[tuple[int, ...], int]:
        return {s: i for i, s in enumerate(self.sites)}

    @property
    def asymptotics(self) -> tuple[float, int] | None:
        """(c_d, alpha) for the GFF kind, None otherwise."""
        return asymptotic_constant(self.d) if self.kind == "gff" else None

    @property
    def kappa_sq(self) -> float:
        """Floor on the smallest eigenvalue of any finite restriction."""
        if self.kind == "gff":
            return iid_floor(self.d)
        if self.kind == "iid":
            return 1.0
        return float(np.linalg.eigvalsh(self.matrix)[0])

    def kernel(self, lags: np.ndarray) -> np.ndarray:
        """K at lattice lags (stationary kinds only)."""
        lags = np.asarray(lags, dtype=np.int64)
        if self.kind == "gff":
            return get_green_service(self.d).evaluate(lags)
        if self.kind == "iid":
            return (np.abs(lags).sum(axis=-1) == 0).astype(float)
        raise GreenFunctionError("explicit covariances have no lag kernel")

    def matrix_for(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64)
        if self.kind == "explicit":
            try:
                idx = [self._explicit_index[tuple(int(c) for c in row)] for row in coords]
            except KeyError as e:
                raise GreenFunctionError(f"site {e.args[0]} is not covered by the explicit covariance") from None
            return self.matrix[np.ix_(idx, idx)].copy()
        lags = coords[:, None, :] - coords[None, :, :]
        return self.kernel(lags)

    def cross_matrix(self, coords_a: np.ndarray, coords_b: np.ndarray) -> np.ndarray:
        coords_a = np.asarray(coords_a, dtype=np.int64)
        coords_b = np.asarray(coords_b, dtype=np.int64)
        if self.kind == "explicit":
            ia = [self._explicit_index[tuple(int(c) for c in row)] for row in coords_a]
            ib = [self._explicit_index[tuple(int(c) for c in row)] for row in coords_b]
            return self.matrix[np.ix_(ia, ib)].copy()
        return self.kernel(coords_a[:, None, :] - coords_b[None, :, :])


def covariance_matrix(model: CovarianceModel, sites: Iterable[Sequence[int]] | np.ndarray) -> np.ndarray:
    """
    Restriction of ``model`` to a list of distinct sites.

    Raises:
        GreenFunctionError: On duplicate sites
        CovarianceError: If the matrix fails a Cholesky check
    """
    coords = np.asarray([tuple(s) for s in sites] if not isinstance(sites, np.ndarray) else sites, dtype=np.int64)
    if coords.ndim != 2:
        raise GreenFunctionError("sites must be a list of lattice vectors")
    if len({tuple(row) for row in coords.tolist()}) != coords.shape[0]:
        raise GreenFunctionError("covariance sites must be distinct")
    matrix = model.matrix_for(coords)
    try:
        linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError as e:
        raise CovarianceError(f"covariance on {coords.shape[0]} sites is not positive definite") from e
    return matrix


def harmonic_solver_oracle(d: int, R: int) -> np.ndarray:
    """
    Dirichlet Green's function on the box of half-side 4R, from the origin.

    Solves (I - P) g = delta_0 with zero boundary values by conjugate
    gradients. Used only to cross-check the quadrature; returns g on the box
    as a d-dimensional array of side 8R + 1.
    """
    if d < 1 or R < 1:
        raise GreenFunctionError("need d >= 1 and R >= 1")
    side = 8 * R + 1
    walk_1d = diags([np.ones(side - 1), np.ones(side - 1)], [-1, 1], format="csr")
    eye_1d = identity(side, format="csr")
    hop = None
    for axis in range(d):
        term = None
        for k in range(d):
            factor = walk_1d if k == axis else eye_1d
            term = factor if term is None else kron(term, factor, format="csr")
        hop = term if hop is None else hop + term
    system = identity(side**d, format="csr") - hop / (2.0 * d)
    rhs = np.zeros(side**d)
    rhs[(side**d) // 2] = 1.0
    solution, info = cg(system, rhs, rtol=1e-12, maxiter=20 * side * d)
    if info != 0:
        raise NumericalError(f"harmonic oracle did not converge (info={info})")
    return solution.reshape((side,) * d)
