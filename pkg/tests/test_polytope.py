import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abreu_lab.errors import InvalidPolytope, PointOutside
from abreu_lab.models import Containment
from abreu_lab.polytope import Polytope

from tests.conftest import INTERVAL_ROWS, SQUARE_ROWS


# ── Construction ─────────────────────────────────────────────────────────

def test_interval_from_rows():
    p = Polytope.from_rows(INTERVAL_ROWS)
    assert p.dim == 1
    assert p.n_facets == 2
    np.testing.assert_allclose(p.vertices, [[0.0], [1.0]])
    np.testing.assert_allclose(p.interior_point, [0.5], atol=1e-9)
    np.testing.assert_allclose(p.sigma_scale, [1.0, 1.0])


def test_square_matches_unit_cube():
    p = Polytope.from_rows(SQUARE_ROWS)
    q = Polytope.unit_cube(2)
    np.testing.assert_allclose(p.vertices, q.vertices)
    assert p.is_box
    assert len(p.vertices) == 4


def test_triangle_is_not_a_box():
    p = Polytope.from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, -1.0, -1.0]])
    assert len(p.vertices) == 3
    assert not p.is_box
    np.testing.assert_allclose(p.sigma_scale, [1.0, 1.0, 1 / np.sqrt(2)])


def test_empty_interior_is_rejected():
    with pytest.raises(InvalidPolytope):
        Polytope.from_rows([[1.0, 0.0], [-1.0, 1.0]])


def test_zero_normal_is_rejected():
    with pytest.raises(InvalidPolytope):
        Polytope.from_rows([[0.0, 0.0], [-1.0, -1.0]])


def test_redundant_facet_is_rejected():
    rows = INTERVAL_ROWS + [[1.0, -1.0]]
    with pytest.raises(InvalidPolytope):
        Polytope.from_rows(rows)


# ── Distances and containment ────────────────────────────────────────────

def test_facet_distances(square, interval):
    np.testing.assert_allclose(square.facet_distances([0.3, 0.5]), [0.3, 0.7, 0.5, 0.5])
    np.testing.assert_allclose(interval.facet_distances([0.5]), [0.5, 0.5])
    assert np.sum(square.facet_distances([0.0, 0.0]) == 0) == 2


def test_euclidean_boundary_distance(square):
    assert square.euclidean_boundary_distance([0.3, 0.5]) == pytest.approx(0.3)
    assert square.euclidean_boundary_distance([0.0, 0.5]) == pytest.approx(0.0)


def test_euclidean_boundary_distance_outside(square):
    with pytest.raises(PointOutside):
        square.euclidean_boundary_distance([1.5, 0.5])


def test_contains(square):
    assert square.contains([0.5, 0.5]) == Containment.interior
    assert square.contains([0.0, 0.5]) == Containment.boundary
    assert square.contains([2.0, 2.0]) == Containment.outside
    labels = square.contains(np.array([[0.5, 0.5], [2.0, 0.0]]))
    assert list(labels) == [Containment.interior.value, Containment.outside.value]


def test_contains_rejects_negative_tolerance(square):
    with pytest.raises(ValueError):
        square.contains([0.5, 0.5], tol=-1.0)


def test_as_rows_round_trip(square):
    again = Polytope.from_rows(square.as_rows(), sigma_scale=square.sigma_scale)
    np.testing.assert_allclose(again.normals, square.normals)
    np.testing.assert_allclose(again.offsets, square.offsets)


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.floats(-2, 2), min_size=2, max_size=2),
    st.lists(st.floats(-2, 2), min_size=2, max_size=2),
    st.floats(0, 1),
)
def test_facet_distances_are_affine(x, y, t):
    square = Polytope.unit_cube(2)
    x, y = np.asarray(x), np.asarray(y)
    mix = square.facet_distances(t * x + (1 - t) * y)
    np.testing.assert_allclose(
        mix, t * square.facet_distances(x) + (1 - t) * square.facet_distances(y), atol=1e-12,
    )
