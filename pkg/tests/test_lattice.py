"""
Tests for lattice geometry: box indexing, adjacency and boundaries.
"""

import pytest

from gfflab.services.lattice_service import (
    LatticeCapacityError,
    LatticeError,
    boundary_faces,
    distance_to_boundary,
    inner_boundary,
    make_box,
    make_domain,
    neighbors,
    rectangle_domain,
)


def test_box_size_and_index_round_trip():
    """Every site of Lambda_R maps to its own dense index."""
    box = make_box(3, 2)
    assert box.n_sites == 125
    for i in range(box.n_sites):
        assert box.index_of(box.site(i)) == i


def test_inner_boundary_count():
    """|dLambda_R| = (2R+1)^d - (2R-1)^d."""
    for d, R in [(2, 3), (3, 2), (4, 1)]:
        box = make_box(d, R)
        assert len(inner_boundary(box)) == (2 * R + 1) ** d - (2 * R - 1) ** d


def test_neighbors_order_and_count():
    """Interior sites have 2d neighbours, minus before plus along each axis."""
    box = make_box(2, 2)
    assert neighbors(box, (0, 0)) == [(-1, 0), (1, 0), (0, -1), (0, 1)]
    assert len(neighbors(box, (2, 2))) == 2


def test_edges_counted_once():
    """A side-n square has 2 n (n - 1) nearest-neighbour edges."""
    box = make_box(2, 2)
    assert box.edges.shape == (2 * 5 * 4, 2)
    assert (box.edges[:, 0] < box.edges[:, 1]).all()


def test_boundary_faces_nested():
    """Corners sit inside the edges, which sit inside the inner boundary."""
    box = make_box(3, 2)
    corners = boundary_faces(box, 0)
    edges = boundary_faces(box, 1)
    faces = boundary_faces(box, 2)
    assert len(corners) == 8
    assert corners <= edges <= faces
    assert faces == inner_boundary(box)


def test_distance_to_boundary():
    box = make_box(3, 4)
    assert distance_to_boundary(box, (0, 0, 0)) == 4
    assert distance_to_boundary(box, (1, -3, 2)) == 1
    with pytest.raises(LatticeError):
        distance_to_boundary(box, (5, 0, 0))


def test_translated_box_contains_its_centre():
    box = make_box(2, 1, origin_offset=(10, -3))
    assert box.contains((10, -3))
    assert not box.contains((0, 0))
    assert box.site(box.centre_index) == (10, -3)


def test_site_domain_boundary():
    """In a 3x3 rectangle only the centre is interior."""
    domain = rectangle_domain((0, 0), (2, 2))
    assert domain.n_sites == 9
    assert len(inner_boundary(domain)) == 8
    assert (1, 1) not in inner_boundary(domain)


def test_site_domain_rejects_duplicates():
    with pytest.raises(LatticeError):
        make_domain([(0, 0), (0, 0)])


def test_invalid_box_arguments():
    with pytest.raises(LatticeError):
        make_box(0, 2)
    with pytest.raises(LatticeError):
        make_box(3, 0)


def test_capacity_limit(monkeypatch):
    """Boxes above the configured index capacity are refused."""
    from gfflab.core.config import get_settings

    monkeypatch.setattr(get_settings(), "max_sites", 100)
    with pytest.raises(LatticeCapacityError):
        make_box(3, 2)
