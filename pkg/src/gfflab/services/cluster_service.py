"""
Excursion sets, cluster labeling and cluster-count functionals.

Labeling is a vectorized union-find: every same-sign edge hooks the larger
of its two roots onto the smaller one, and pointer jumping compresses all
paths after each round. The fixed point gives each site the minimum site
index of its component, which serves as the canonical label. Many masks are
labeled in one pass by offsetting their site indices, so Monte Carlo loops
and exhaustive tables never label configurations one at a time in Python.

The count Xi_D(E) is the number of components of E and of D minus E that
do not meet the inner boundary of D.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from gfflab.core.config import get_settings
from gfflab.core.errors import UsageError
from gfflab.services.lattice_service import LatticeBox, _DomainGeometry

logger = logging.getLogger(__name__)

PARTS = ("both", "plus", "minus")


class ClusterError(UsageError):
    """Invalid cluster-count request."""

    pass


class ArmWindowError(ClusterError):
    """The observation window cannot certify boundedness for the event."""

    pass


@dataclass
class ExcursionSet:
    """
    The set {f > level} on a domain, as a bitmask over the dense site index.

    Ties f = level are assigned to the complement.
    """

    domain: _DomainGeometry
    mask: np.ndarray
    level: float = 0.0

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.domain.n_sites,):
            raise ClusterError("mask does not match the domain")

    @classmethod
    def from_values(cls, domain: _DomainGeometry, values: np.ndarray, level: float) -> "ExcursionSet":
        return cls(domain, np.asarray(values) > level, level)

    @property
    def complement(self) -> np.ndarray:
        return ~self.mask


def union_find_labels(n_nodes: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """
    Connected components of the graph on range(n_nodes) with edges (u, v).

    Returns:
        Array mapping every node to the smallest node of its component.
    """
    parent = np.arange(n_nodes, dtype=np.int64)
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    while True:
        pu, pv = parent[u], parent[v]
        differ = pu != pv
        if not differ.any():
            return parent
        lo = np.minimum(pu[differ], pv[differ])
        hi = np.maximum(pu[differ], pv[differ])
        np.minimum.at(parent, hi, lo)
        # pointer jumping: afterwards every node points at a root
        while True:
            grand = parent[parent]
            if np.array_equal(grand, parent):
                break
            parent = grand


def label_batch(domain: _DomainGeometry, masks: np.ndarray) -> np.ndarray:
    """
    Label B masks at once.

    Args:
        domain: Domain carrying the site adjacency
        masks: Boolean array (B, n); True marks E, False the complement

    Returns:
        Labels (B, n): the minimum site index of each site's same-sign component
    """
    masks = np.atleast_2d(np.asarray(masks, dtype=bool))
    batch, n = masks.shape
    edges = domain.edges
    same = masks[:, edges[:, 0]] == masks[:, edges[:, 1]]
    rows, cols = np.nonzero(same)
    offset = rows * n
    parent = union_find_labels(batch * n, offset + edges[cols, 0], offset + edges[cols, 1])
    return parent.reshape(batch, n) - (np.arange(batch, dtype=np.int64) * n)[:, None]


def _component_arrays(
    domain: _DomainGeometry, masks: np.ndarray, labels: np.ndarray, with_diameter: bool
) -> dict[str, np.ndarray]:
    """Per-site-slot statistics, indexed by global label b * n + root."""
    batch, n = masks.shape
    glabels = (labels + (np.arange(batch, dtype=np.int64) * n)[:, None]).ravel()
    size = np.bincount(glabels, minlength=batch * n)
    boundary = np.broadcast_to(domain.boundary_mask, masks.shape).ravel()
    touches = np.bincount(glabels, weights=boundary.astype(float), minlength=batch * n) > 0
    stats = {"size": size, "touches_boundary": touches}
    if with_diameter:
        diameter = np.zeros(batch * n, dtype=np.int64)
        for axis in range(domain.d):
            coord = np.broadcast_to(domain.coords[:, axis], masks.shape).ravel()
            high = np.full(batch * n, np.iinfo(np.int64).min)
            low = np.full(batch * n, np.iinfo(np.int64).max)
            np.maximum.at(high, glabels, coord)
            np.minimum.at(low, glabels, coord)
            diameter = np.maximum(diameter, np.where(size > 0, high - low, 0))
        stats["diameter"] = diameter
    return stats


def count_batch(
    domain: _DomainGeometry,
    masks: np.ndarray,
    max_diameter: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Boundary-avoiding component counts (N^+, N^-) for B masks.

    With ``max_diameter`` only components of d_inf diameter <= max_diameter count.
    """
    masks = np.atleast_2d(np.asarray(masks, dtype=bool))
    batch, n = masks.shape
    labels = label_batch(domain, masks)
    stats = _component_arrays(domain, masks, labels, with_diameter=max_diameter is not None)
    is_root = (labels == np.arange(n)[None, :]).ravel()
    counted = is_root & ~stats["touches_boundary"]
    if max_diameter is not None:
        counted &= stats["diameter"] <= max_diameter
    counted = counted.reshape(batch, n)
    positive = counted & masks
    return positive.sum(axis=1), (counted & ~masks).sum(axis=1)


def xi_values(
    domain: _DomainGeometry,
    masks: np.ndarray,
    max_diameter: int | None = None,
    batch_size: int | None = None,
    part: str = "both",
) -> np.ndarray:
    """
    Xi_D (or the truncated count) for each row of ``masks``, in chunks.

    ``part`` selects N^+ + N^- ("both"), N^+ ("plus") or N^- ("minus").
    """
    if part not in PARTS:
        raise ClusterError(f"unknown count part '{part}'")
    masks = np.atleast_2d(np.asarray(masks, dtype=bool))
    chunk = batch_size or get_settings().batch_size
    out = np.empty(masks.shape[0], dtype=np.int64)
    for start in range(0, masks.shape[0], chunk):
        plus, minus = count_batch(domain, masks[start : start + chunk], max_diameter)
        out[start : start + chunk] = {"both": plus + minus, "plus": plus, "minus": minus}[part]
    return out


@dataclass
class ClusterLabeling:
    """
    Component structure of one excursion set.

    Attributes:
        excursion: The labeled excursion set
        labels: Minimum site index of each site's same-sign component
        roots: Canonical label of every component
        positive: Whether each component lies in E (else in the complement)
        sizes: |C| per component
        diameters: d_inf diameter per component
        touches_boundary: Whether each component meets the inner boundary
            (the window edge when the domain is an observation window)
    """

    excursion: ExcursionSet
    labels: np.ndarray
    roots: np.ndarray
    positive: np.ndarray
    sizes: np.ndarray
    diameters: np.ndarray
    touches_boundary: np.ndarray

    @property
    def domain(self) -> _DomainGeometry:
        return self.excursion.domain

    @property
    def window_bounded(self) -> np.ndarray:
        return ~self.touches_boundary

    @cached_property
    def component_of_root(self) -> dict[int, int]:
        return {int(r): k for k, r in enumerate(self.roots)}

    def component_size(self, site_index: int) -> int:
        return int(self.sizes[self.component_of_root[int(self.labels[site_index])]])


def label_clusters(ex: ExcursionSet) -> ClusterLabeling:
    """
    Union-find labeling of E and its complement.

    Canonical labels are minimum site indices, so results are deterministic.
    """
    masks = ex.mask[None, :]
    labels = label_batch(ex.domain, masks)
    stats = _component_arrays(ex.domain, masks, labels, with_diameter=True)
    labels = labels[0]
    roots = np.flatnonzero(labels == np.arange(ex.domain.n_sites))
    return ClusterLabeling(
        excursion=ex,
        labels=labels,
        roots=roots,
        positive=ex.mask[roots],
        sizes=stats["size"][roots],
        diameters=stats["diameter"][roots],
        touches_boundary=stats["touches_boundary"][roots],
    )


def count_clusters(lab: ClusterLabeling) -> tuple[int, int, int]:
    """(N^+, N^-, N): components disjoint from the inner boundary."""
    bounded = lab.window_bounded
    n_plus = int(np.count_nonzero(bounded & lab.positive))
    n_minus = int(np.count_nonzero(bounded & ~lab.positive))
    return n_plus, n_minus, n_plus + n_minus


def count_truncated(lab: ClusterLabeling, r: int) -> tuple[int, int]:
    """(N_{<=r}, N_{>r}) by d_inf diameter among the counted components."""
    if r < 0:
        raise ClusterError(f"diameter cutoff must be non-negative, got {r}")
    bounded = lab.window_bounded
    small = int(np.count_nonzero(bounded & (lab.diameters <= r)))
    return small, int(np.count_nonzero(bounded)) - small


def _check_distinct(points: Sequence[int]) -> np.ndarray:
    idx = np.asarray(points, dtype=np.int64)
    if len(set(idx.tolist())) != idx.size:
        raise ClusterError("discrete derivatives take distinct points; repeats are handled by the chaos module")
    return idx


def _subset_signs(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows of in/out assignments for 2^k subsets and their signs (-1)^{k - |S|}."""
    subsets = ((np.arange(2**k)[:, None] >> np.arange(k)[None, :]) & 1).astype(bool)
    signs = np.where((k - subsets.sum(axis=1)) % 2 == 0, 1, -1)
    return subsets, signs


def discrete_derivative_batch(
    domain: _DomainGeometry,
    masks: np.ndarray,
    ybar: Sequence[int],
    max_diameter: int | None = None,
    part: str = "both",
) -> np.ndarray:
    """
    Iterated derivative d_ybar Xi for each row of ``masks``.

    d_ybar Xi(E) = sum over S subset of ybar of (-1)^{|ybar|-|S|} Xi((E minus ybar) union S).
    """
    masks = np.atleast_2d(np.asarray(masks, dtype=bool))
    idx = _check_distinct(ybar)
    subsets, signs = _subset_signs(idx.size)
    variants = np.repeat(masks[:, None, :], subsets.shape[0], axis=1)
    variants[:, :, idx] = subsets[None, :, :]
    values = xi_values(domain, variants.reshape(-1, masks.shape[1]), max_diameter, part=part)
    return values.reshape(masks.shape[0], -1) @ signs


def discrete_derivative(
    domain: _DomainGeometry,
    E: np.ndarray,
    ybar: Sequence[Sequence[int]] | Sequence[int],
    max_diameter: int | None = None,
    part: str = "both",
) -> int:
    """
    d_ybar Xi(E) for distinct sites ``ybar`` (coordinates or indices).

    Raises:
        ClusterError: If ``ybar`` repeats a site
    """
    ybar = list(ybar)
    if ybar and not np.isscalar(ybar[0]):
        ybar = [domain.index_of(y) for y in ybar]
    return int(discrete_derivative_batch(domain, np.asarray(E)[None, :], ybar, max_diameter, part)[0])


class ClusterCountTable:
    """
    Xi_D for all 2^|D| masks of a small domain.

    Bit i of a mask code is site i. Derivatives and moments of Xi then reduce
    to table lookups.
    """

    def __init__(
        self,
        domain: _DomainGeometry,
        max_diameter: int | None = None,
        part: str = "both",
        chunk: int = 4096,
    ):
        n = domain.n_sites
        cap = get_settings().table_max_sites
        if n > cap:
            raise ClusterError(f"exhaustive table needs |D| <= {cap}, got {n}")
        self.domain = domain
        self.max_diameter = max_diameter
        self.part = part
        self.n_sites = n
        self._bits = (np.int64(1) << np.arange(n, dtype=np.int64))
        values = np.empty(2**n, dtype=np.int64)
        for start in range(0, 2**n, chunk):
            codes = np.arange(start, min(start + chunk, 2**n), dtype=np.int64)
            values[start : start + codes.size] = xi_values(domain, self.decode(codes), max_diameter, chunk, part)
        self.values = values

    def encode(self, masks: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(np.asarray(masks, dtype=bool)).astype(np.int64) * self._bits).sum(axis=1)

    def decode(self, codes: np.ndarray) -> np.ndarray:
        return (np.asarray(codes, dtype=np.int64)[:, None] & self._bits[None, :]) != 0

    def derivative(self, codes: np.ndarray, ybar: Sequence[int]) -> np.ndarray:
        """d_ybar Xi for each mask code."""
        idx = _check_distinct(ybar)
        codes = np.asarray(codes, dtype=np.int64)
        ybits = self._bits[idx]
        cleared = codes & ~ybits.sum()
        subsets, signs = _subset_signs(idx.size)
        total = np.zeros(codes.shape, dtype=np.int64)
        for row, sign in zip(subsets, signs):
            total += sign * self.values[cleared | int(ybits[row].sum())]
        return total

    @cached_property
    def relevant_sites(self) -> np.ndarray:
        """Sites y at which d_y Xi is not identically zero."""
        codes = np.arange(2**self.n_sites, dtype=np.int64)
        return np.array(
            [y for y in range(self.n_sites) if np.any(self.derivative(codes, [y]) != 0)], dtype=np.int64
        )


def _check_window(window: LatticeBox, center: Sequence[int], R: int) -> None:
    offset = [int(c) - o for c, o in zip(center, window.origin_offset)]
    if max(abs(c) for c in offset) + R >= window.R:
        raise ArmWindowError(
            f"window of half-side {window.R} cannot certify an arm of length {R} around {tuple(center)}"
        )


def _shell_and_neighbours(domain: _DomainGeometry, center: Sequence[int], R: int) -> tuple[np.ndarray, np.ndarray]:
    rel = np.abs(domain.coords - np.asarray(center)).max(axis=1)
    l1 = np.abs(domain.coords - np.asarray(center)).sum(axis=1)
    return np.flatnonzero(rel == R), np.flatnonzero(l1 == 1)


def arm_event(
    window: LatticeBox,
    E: np.ndarray,
    origin: Sequence[int],
    R: int,
    pins: Sequence[Sequence[int]] = (),
) -> bool:
    """
    Truncated arm event on an observation window.

    True iff some component of E minus the pins does not touch the window edge
    and joins a neighbour of the origin (or, when pins are given, of some pin)
    to the corresponding translate of the inner boundary of Lambda_R.

    Raises:
        ArmWindowError: If the window is not strictly larger than centre + Lambda_R
    """
    centres = [tuple(p) for p in pins] if pins else [tuple(origin)]
    for c in centres:
        _check_window(window, c, R)
    mask = np.asarray(E, dtype=bool).copy()
    for p in pins:
        mask[window.index_of(p)] = False
    lab = label_clusters(ExcursionSet(window, mask))
    good_roots = set(lab.roots[lab.positive & lab.window_bounded].tolist())
    for c in centres:
        shell, near = _shell_and_neighbours(window, c, R)
        near_roots = {int(lab.labels[i]) for i in near if mask[i]} & good_roots
        if not near_roots:
            continue
        shell_roots = {int(lab.labels[i]) for i in shell if mask[i]}
        if near_roots & shell_roots:
            return True
    return False


def two_arm_event(window: LatticeBox, E: np.ndarray, origin: Sequence[int], R: int) -> bool:
    """
    True iff (E cap (origin + Lambda_R)) minus the origin has two distinct
    components each joining a neighbour of the origin to origin + inner boundary.
    """
    sub = LatticeBox(window.d, R, tuple(int(c) for c in origin))
    if not all(window.contains(sub.site(i)) for i in np.flatnonzero(sub.boundary_mask)):
        raise ArmWindowError("the box around the origin does not fit inside the window")
    mask = np.asarray(E, dtype=bool)[window.indices_of(map(tuple, sub.coords.tolist()))].copy()
    mask[sub.centre_index] = False
    labels = label_batch(sub, mask[None, :])[0]
    shell, near = _shell_and_neighbours(sub, origin, R)
    near_roots = {int(labels[i]) for i in near if mask[i]}
    shell_roots = {int(labels[i]) for i in shell if mask[i]}
    return len(near_roots & shell_roots) >= 2


def density_estimator(lab: ClusterLabeling, mode: str = "count", core: LatticeBox | None = None) -> float:
    """
    Estimate the cluster density mu from one labeling.

    Args:
        lab: Labeling of an observation window
        mode: "count" for N / |window|; "inverse-size" for the average of
            1/|C_x| over sites x of ``core``, with clusters touching the
            window edge contributing zero
        core: Sub-box for the inverse-size average (the whole window by default)
    """
    if mode == "count":
        return count_clusters(lab)[2] / lab.domain.n_sites
    if mode == "inverse-size":
        if core is None:
            sites = np.arange(lab.domain.n_sites)
        else:
            sites = lab.domain.indices_of(map(tuple, core.coords.tolist()))
        sizes = np.zeros(lab.domain.n_sites)
        sizes[lab.roots] = np.where(lab.window_bounded, 1.0 / lab.sizes, 0.0)
        return float(sizes[lab.labels[sites]].mean())
    raise ClusterError(f"unknown density mode '{mode}'")


def stabilisation_certified(domain: _DomainGeometry, masks: np.ndarray, ybar: Sequence[int]) -> np.ndarray:
    """
    For each mask, whether every cluster of E minus ybar and of the complement
    minus ybar that is adjacent to ybar stays away from the window edge.
    """
    masks = np.atleast_2d(np.asarray(masks, dtype=bool))
    idx = _check_distinct(ybar)
    near = sorted({int(j) for y in idx for j in domain.neighbor_table[y] if j >= 0} - set(idx.tolist()))
    near = np.asarray(near, dtype=np.int64)
    certified = np.ones(masks.shape[0], dtype=bool)
    if near.size == 0:
        return certified
    for fill in (False, True):
        variant = masks.copy()
        variant[:, idx] = fill
        labels = label_batch(domain, variant)
        stats = _component_arrays(domain, variant, labels, with_diameter=False)
        n = masks.shape[1]
        glabels = labels + (np.arange(masks.shape[0]) * n)[:, None]
        # clusters of the set that excludes ybar: E if fill is False, complement otherwise
        in_set = variant[:, near] != fill
        touching = stats["touches_boundary"][glabels[:, near]]
        certified &= ~(in_set & touching).any(axis=1)
    return certified
