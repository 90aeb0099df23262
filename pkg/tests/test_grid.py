import numpy as np
import pytest

from abreu_lab.errors import DegenerateHessian, TooCoarse
from abreu_lab.grid import (
    Grid, GridFn, boundary_integral, det_field, fd_gradient, fd_hessian, fd_hessian_det,
    hessian_field, interior_integral,
)
from abreu_lab.models import NodeKind


def test_interval_node_kinds(interval):
    grid = Grid.build(interval, 1 / 4)
    assert grid.shape == (4,)
    np.testing.assert_allclose(grid.points[:, 0], [0.125, 0.375, 0.625, 0.875])
    assert grid.kind.tolist() == [NodeKind.band, NodeKind.interior, NodeKind.interior, NodeKind.band]


def test_too_coarse(interval):
    with pytest.raises(TooCoarse):
        Grid.build(interval, 0.5)


def test_triangle_has_outside_nodes():
    from abreu_lab.polytope import Polytope

    tri = Polytope.from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, -1.0, -1.0]])
    grid = Grid.build(tri, 1 / 16)
    assert (grid.flat_kind == NodeKind.outside).any()
    inside = tri.facet_distances(grid.points[grid.active])
    assert (inside > 0).all()


def test_volumes_sum_to_area(square):
    grid = Grid.build(square, 1 / 16)
    assert grid.volumes.sum() == pytest.approx(1.0)


def test_mask_erodes(square):
    grid = Grid.build(square, 1 / 32)
    mask = grid.mask(0.1)
    assert mask.any()
    assert (square.facet_distances(grid.points[mask]) >= 0.1).all()
    assert not (mask & ~grid.interior).any()


# ── Finite differences ───────────────────────────────────────────────────

def test_fd_exact_on_quadratics(square):
    grid = Grid.build(square, 1 / 16)
    g = GridFn.sample(grid, lambda p: p[:, 0] ** 2 + 3 * p[:, 0] * p[:, 1] - p[:, 1])
    grad = fd_gradient(g)
    hess = fd_hessian(g)
    act = grid.active
    pts = grid.points[act]
    np.testing.assert_allclose(grad[act, 0], 2 * pts[:, 0] + 3 * pts[:, 1], atol=1e-10)
    np.testing.assert_allclose(grad[act, 1], 3 * pts[:, 0] - 1, atol=1e-10)
    np.testing.assert_allclose(hess[grid.interior], np.broadcast_to([[2.0, 3.0], [3.0, 0.0]], (grid.interior.sum(), 2, 2)),
                               atol=1e-8)


def test_fd_hessian_det(square):
    grid = Grid.build(square, 1 / 16)
    g = GridFn.sample(grid, lambda p: 0.5 * (p ** 2).sum(axis=1))
    hf = fd_hessian_det(g)
    np.testing.assert_allclose(hf.det[grid.interior], 1.0, atol=1e-8)
    np.testing.assert_allclose(hf.inverse[grid.interior][:, 0, 0], 1.0, atol=1e-8)


def test_degenerate_hessian_is_reported(square):
    grid = Grid.build(square, 1 / 16)
    g = GridFn.sample(grid, lambda p: p[:, 0] ** 2)
    with pytest.raises(DegenerateHessian) as err:
        fd_hessian_det(g)
    assert err.value.context


def test_det_field_matches_numpy(rng):
    for n in (1, 2, 3, 4):
        m = rng.normal(size=(10, n, n))
        np.testing.assert_allclose(det_field(m), np.linalg.det(m), rtol=1e-10, atol=1e-12)


def test_hessian_field_floor(rng):
    hess = np.array([[[1.0, 0.0], [0.0, 1e-14]], [[2.0, 0.0], [0.0, 2.0]]])
    hf = hessian_field(hess, check=np.array([False, True]))
    assert np.isnan(hf.inverse[0]).all()
    np.testing.assert_allclose(hf.inverse[1], np.eye(2) / 2)


def test_interpolation_is_affine_exact(square, rng):
    grid = Grid.build(square, 1 / 16)
    g = GridFn.sample(grid, lambda p: 1.0 + 2.0 * p[:, 0] - 0.5 * p[:, 1])
    pts = rng.uniform(0.0, 1.0, size=(50, 2))
    values = grid.interpolation_matrix(pts) @ np.nan_to_num(g.values)
    np.testing.assert_allclose(values, 1.0 + 2.0 * pts[:, 0] - 0.5 * pts[:, 1], atol=1e-10)


# ── Quadrature ───────────────────────────────────────────────────────────

def test_interior_integral(square):
    grid = Grid.build(square, 1 / 32)
    assert interior_integral(grid, lambda p: p[:, 0]) == pytest.approx(0.5, abs=1e-3)


def test_boundary_integral(square):
    rule = Grid.build(square, 1 / 32).boundary_rule
    assert boundary_integral(rule) == pytest.approx(4.0, abs=1e-9)
    assert boundary_integral(rule, lambda p: p[:, 0]) == pytest.approx(2.0, abs=1e-6)


def test_boundary_rule_interval(interval):
    rule = Grid.build(interval, 1 / 16).boundary_rule
    np.testing.assert_allclose(np.sort(rule.points[:, 0]), [0.0, 1.0])
    np.testing.assert_allclose(rule.weights, [1.0, 1.0])


def test_boundary_rule_cube_area():
    from abreu_lab.polytope import Polytope

    rule = Grid.build(Polytope.unit_cube(3), 1 / 8).boundary_rule
    assert boundary_integral(rule) == pytest.approx(6.0, rel=1e-9)
