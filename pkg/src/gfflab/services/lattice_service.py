"""
Lattice geometry for finite domains of Z^d.

Provides boxes Lambda_R (dense row-major site index, adjacency, inner
boundary, closed boundary faces) and arbitrary finite site sets with the
same interface. Every downstream bitmask and union-find structure keys on
the dense site index defined here.
"""

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from gfflab.core.config import get_settings
from gfflab.core.errors import UsageError

Site = tuple[int, ...]


class LatticeError(UsageError):
    """Invalid lattice geometry request."""

    pass


class LatticeCapacityError(LatticeError):
    """The requested domain does not fit the configured site index."""

    pass


def sup_norm(x: Sequence[int]) -> int:
    """d_inf norm of a lattice vector."""
    return int(max((abs(c) for c in x), default=0))


def euclidean_norm(x: Sequence[int]) -> float:
    """d_2 norm of a lattice vector."""
    return float(np.sqrt(sum(c * c for c in x)))


class _DomainGeometry:
    """
    Shared behaviour of finite site sets.

    Subclasses provide ``d``, ``coords`` (n, d) and ``neighbor_table``
    (n, 2d) with -1 where the lattice neighbour lies outside the domain.
    Column 2*i holds the neighbour in direction -e_i, column 2*i+1 the one in
    direction +e_i.
    """

    d: int

    @property
    def n_sites(self) -> int:
        return int(self.coords.shape[0])

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        """Sites with at least one lattice neighbour outside the domain."""
        return (self.neighbor_table < 0).any(axis=1)

    @cached_property
    def edges(self) -> np.ndarray:
        """Undirected nearest-neighbour pairs (u, v) with u < v, shape (E, 2)."""
        n = self.n_sites
        # only the + direction columns, so every edge appears once
        plus = self.neighbor_table[:, 1::2]
        u = np.repeat(np.arange(n), plus.shape[1])
        v = plus.ravel()
        keep = v >= 0
        pairs = np.stack([u[keep], v[keep]], axis=1)
        lo = pairs.min(axis=1)
        hi = pairs.max(axis=1)
        return np.stack([lo, hi], axis=1).astype(np.int64)

    @cached_property
    def _index(self) -> dict[Site, int]:
        return {tuple(int(c) for c in row): i for i, row in enumerate(self.coords)}

    def index_of(self, x: Sequence[int]) -> int:
        """Dense index of site ``x``; raises LatticeError if ``x`` is outside."""
        key = tuple(int(c) for c in x)
        if len(key) != self.d:
            raise LatticeError(f"site {key} has dimension {len(key)}, expected {self.d}")
        try:
            return self._index[key]
        except KeyError:
            raise LatticeError(f"site {key} is outside the domain") from None

    def indices_of(self, sites: Iterable[Sequence[int]]) -> np.ndarray:
        return np.array([self.index_of(x) for x in sites], dtype=np.int64)

    def contains(self, x: Sequence[int]) -> bool:
        return tuple(int(c) for c in x) in self._index

    def site(self, index: int) -> Site:
        return tuple(int(c) for c in self.coords[index])

    def neighbor_indices(self, index: int) -> list[int]:
        return [int(j) for j in self.neighbor_table[index] if j >= 0]


@dataclass(frozen=True, eq=True)
class LatticeBox(_DomainGeometry):
    """
    The box Lambda_R = origin + [-R, R]^d intersected with Z^d.

    Attributes:
        d: Dimension
        R: Half-side
        origin_offset: Centre of the box (zero vector by default)
    """

    d: int
    R: int
    origin_offset: Site = field(default=())

    def __post_init__(self) -> None:
        if self.d < 1:
            raise LatticeError(f"dimension must be >= 1, got {self.d}")
        if self.R < 1:
            raise LatticeError(f"half-side must be >= 1, got {self.R}")
        if not self.origin_offset:
            object.__setattr__(self, "origin_offset", (0,) * self.d)
        elif len(self.origin_offset) != self.d:
            raise LatticeError("origin offset dimension does not match d")
        object.__setattr__(self, "origin_offset", tuple(int(c) for c in self.origin_offset))

    @property
    def side(self) -> int:
        return 2 * self.R + 1

    @property
    def n_sites(self) -> int:
        return self.side**self.d

    @cached_property
    def coords(self) -> np.ndarray:
        """Site coordinates in row-major order, shape (n, d)."""
        grid = np.indices((self.side,) * self.d).reshape(self.d, -1).T
        return grid - self.R + np.asarray(self.origin_offset, dtype=np.int64)

    @cached_property
    def neighbor_table(self) -> np.ndarray:
        n, side, d = self.n_sites, self.side, self.d
        local = self.coords - np.asarray(self.origin_offset) + self.R
        table = np.full((n, 2 * d), -1, dtype=np.int64)
        idx = np.arange(n, dtype=np.int64)
        for axis in range(d):
            stride = side ** (d - 1 - axis)
            lower = local[:, axis] > 0
            upper = local[:, axis] < side - 1
            table[lower, 2 * axis] = idx[lower] - stride
            table[upper, 2 * axis + 1] = idx[upper] + stride
        return table

    def index_of(self, x: Sequence[int]) -> int:
        if len(x) != self.d:
            raise LatticeError(f"site {tuple(x)} has dimension {len(x)}, expected {self.d}")
        local = [int(c) - o + self.R for c, o in zip(x, self.origin_offset)]
        if any(c < 0 or c >= self.side for c in local):
            raise LatticeError(f"site {tuple(x)} is outside the box")
        index = 0
        for c in local:
            index = index * self.side + c
        return index

    def contains(self, x: Sequence[int]) -> bool:
        return len(x) == self.d and all(
            abs(int(c) - o) <= self.R for c, o in zip(x, self.origin_offset)
        )

    @property
    def centre_index(self) -> int:
        return self.index_of(self.origin_offset)

    def translate(self, shift: Sequence[int]) -> "LatticeBox":
        return LatticeBox(self.d, self.R, tuple(o + int(s) for o, s in zip(self.origin_offset, shift)))


class SiteDomain(_DomainGeometry):
    """
    An arbitrary finite set D of Z^d with lattice adjacency.

    The inner boundary consists of the sites with a lattice neighbour outside D.
    """

    def __init__(self, coords: Iterable[Sequence[int]]):
        array = np.array([tuple(int(c) for c in x) for x in coords], dtype=np.int64)
        if array.ndim != 2 or array.shape[0] == 0:
            raise LatticeError("a domain needs at least one site")
        if len({tuple(row) for row in array.tolist()}) != array.shape[0]:
            raise LatticeError("domain sites must be distinct")
        self.d = int(array.shape[1])
        self.coords = array

    @cached_property
    def neighbor_table(self) -> np.ndarray:
        table = np.full((self.n_sites, 2 * self.d), -1, dtype=np.int64)
        for i, row in enumerate(self.coords.tolist()):
            for axis in range(self.d):
                for step, col in ((-1, 2 * axis), (1, 2 * axis + 1)):
                    y = list(row)
                    y[axis] += step
                    table[i, col] = self._index.get(tuple(y), -1)
        return table

    def __repr__(self) -> str:
        return f"<SiteDomain(d={self.d}, n_sites={self.n_sites})>"


def make_box(d: int, R: int, origin_offset: Sequence[int] | None = None) -> LatticeBox:
    """
    Build Lambda_R in dimension d.

    Args:
        d: Dimension, at least 1
        R: Half-side, at least 1
        origin_offset: Optional centre of the box

    Returns:
        LatticeBox with (2R+1)^d sites

    Raises:
        LatticeError: If d or R is out of range
        LatticeCapacityError: If the site count exceeds the configured index capacity

    Example:
        >>> make_box(3, 2).n_sites
        125
    """
    if d < 1 or R < 1:
        raise LatticeError(f"need d >= 1 and R >= 1, got d={d}, R={R}")
    capacity = get_settings().max_sites
    n_sites = (2 * R + 1) ** d
    if n_sites > capacity:
        raise LatticeCapacityError(
            f"box with d={d}, R={R} has {n_sites} sites, above the index capacity {capacity}"
        )
    return LatticeBox(d, R, tuple(origin_offset) if origin_offset is not None else ())


def make_domain(coords: Iterable[Sequence[int]]) -> SiteDomain:
    """Build an arbitrary finite domain from its site coordinates."""
    return SiteDomain(coords)


def rectangle_domain(lower: Sequence[int], upper: Sequence[int]) -> SiteDomain:
    """Sites x with lower <= x <= upper componentwise (any side lengths)."""
    ranges = [np.arange(lo, hi + 1) for lo, hi in zip(lower, upper)]
    if any(len(r) == 0 for r in ranges):
        raise LatticeError("empty rectangle")
    grid = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, len(ranges))
    return SiteDomain(grid)


def inner_boundary(box: _DomainGeometry) -> frozenset[Site]:
    """Sites of the domain having a lattice neighbour outside it."""
    return frozenset(box.site(i) for i in np.flatnonzero(box.boundary_mask))


def boundary_faces(box: LatticeBox, i: int) -> frozenset[Site]:
    """
    Union F_R^i of the closed i-dimensional boundary faces.

    A site lies on a closed i-face when at least d - i of its coordinates sit
    at +-R, so F_R^{d-1} is the inner boundary and F_R^0 the corners.
    """
    if not 0 <= i <= box.d - 1:
        raise LatticeError(f"face dimension must be in [0, {box.d - 1}], got {i}")
    local = np.abs(box.coords - np.asarray(box.origin_offset))
    extreme = (local == box.R).sum(axis=1)
    return frozenset(box.site(j) for j in np.flatnonzero(extreme >= box.d - i))


def neighbors(box: _DomainGeometry, x: Sequence[int]) -> list[Site]:
    """In-domain nearest neighbours of ``x``: axis order, minus before plus."""
    index = box.index_of(x)
    return [box.site(j) for j in box.neighbor_table[index] if j >= 0]


def distance_to_boundary(box: LatticeBox, x: Sequence[int]) -> int:
    """d_inf distance from ``x`` to the inner boundary, R - ||x - o||_inf."""
    if not box.contains(x):
        raise LatticeError(f"site {tuple(x)} is outside the box")
    return box.R - sup_norm([c - o for c, o in zip(x, box.origin_offset)])
