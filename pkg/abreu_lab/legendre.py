"""Normal map and numerical Legendre transform.

f(x) = max_ξ ⟨x, ξ⟩ − u(ξ), by brute force over sample nodes followed by a
golden-section polish along each axis.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import ndimage

from abreu_lab.errors import DualBoxTooSmall
from abreu_lab.grid import Grid, GridFn
from abreu_lab.polytope import Polytope
from abreu_lab.potentials import SPotential

logger = logging.getLogger(__name__)

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class DualGridFn(GridFn):
    gradient_map: Optional[np.ndarray] = None  # argmax ξ(x) per dual node
    source: Optional[object] = None


@dataclass(frozen=True, eq=False)
class ConvexSample:
    """Sample nodes of a convex function plus a continuous evaluator."""

    points: np.ndarray
    values: np.ndarray
    gradients: np.ndarray
    on_edge: np.ndarray
    h: np.ndarray
    evaluate: Optional[Callable[[np.ndarray], np.ndarray]] = None
    domain: Optional[Polytope] = None
    box: Optional[tuple[np.ndarray, np.ndarray]] = None

    @classmethod
    def from_potential(cls, u: SPotential, region_margin: Optional[float] = None) -> "ConvexSample":
        grid = u.grid
        region = grid.active if region_margin is None else grid.mask(region_margin)
        nodes = np.flatnonzero(region)
        return cls(
            points=grid.points[nodes],
            values=u.values()[nodes],
            gradients=u.gradient()[nodes],
            on_edge=_edge_nodes(grid, region)[nodes],
            h=grid.h,
            evaluate=u.evaluate,
            domain=grid.polytope,
        )

    @classmethod
    def from_dual(cls, f: DualGridFn) -> "ConvexSample":
        grid = f.grid
        region = grid.active & np.isfinite(f.values)
        nodes = np.flatnonzero(region)
        usable = region

        def evaluate(points):
            interp = grid.interpolation_matrix(np.atleast_2d(points), usable)
            return interp @ np.nan_to_num(f.values)

        return cls(
            points=grid.points[nodes],
            values=f.values[nodes],
            gradients=f.gradient_map[nodes],
            on_edge=_edge_nodes(grid, region)[nodes],
            h=grid.h,
            evaluate=evaluate,
            box=(grid.lo + 0.5 * grid.h, grid.hi - 0.5 * grid.h),
        )


def _edge_nodes(grid: Grid, region: np.ndarray) -> np.ndarray:
    outside = ~region.reshape(grid.shape)
    near = ndimage.binary_dilation(outside, structure=np.ones((3,) * grid.dim, dtype=bool), border_value=1)
    return (near & ~outside).ravel()


def normal_map(u: SPotential) -> np.ndarray:
    """∇u at active nodes: analytic v-gradient plus FD φ-gradient."""
    u.hessian_field()
    grad = u.gradient()
    grad[~u.grid.active] = np.nan
    return grad


def default_dual_box(sample: ConvexSample, inflate: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    grads = sample.gradients[np.isfinite(sample.gradients).all(axis=1)]
    lo, hi = grads.min(axis=0), grads.max(axis=0)
    width = np.maximum(hi - lo, 1e-6 * (1.0 + np.abs(hi)))
    return lo - 0.5 * inflate * width, hi + 0.5 * inflate * width


def default_dual_h(sample: ConvexSample, lo, hi) -> float:
    """Spacing giving the dual box as many nodes per axis as the sample has."""
    extent = np.ptp(sample.points, axis=0) + sample.h
    return float(((np.asarray(hi) - np.asarray(lo)) * sample.h / extent).min())


def legendre_transform(
    u: Union[SPotential, ConvexSample],
    dual_box: Optional[tuple] = None,
    dual_h: Optional[float] = None,
    region_margin: Optional[float] = None,
    inflate: float = 0.1,
    sweeps: int = 2,
    iterations: int = 48,
) -> DualGridFn:
    sample = ConvexSample.from_potential(u, region_margin) if isinstance(u, SPotential) else u
    if dual_box is None:
        lo, hi = default_dual_box(sample, inflate)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in dual_box)
    if dual_h is None:
        dual_h = default_dual_h(sample, lo, hi)
    grid = Grid.from_box(lo, hi, dual_h)
    x = grid.points

    best, arg = _brute_force(x, sample)
    edge = sample.on_edge[arg]
    xi = sample.points[arg].copy()
    live = np.flatnonzero(~edge)
    if live.size == 0:
        raise DualBoxTooSmall("every dual node takes its max on the sample boundary",
                              context=[lo.tolist(), hi.tolist()])

    if sample.evaluate is not None:
        for _ in range(sweeps):
            for axis in range(grid.dim):
                _polish_axis(sample, x[live], xi[live], best[live], axis, iterations, out=(xi, best, live))

    outside = edge.reshape(grid.shape)
    dgrid = grid.with_outside(outside)
    if not dgrid.interior.any():
        raise DualBoxTooSmall("no Interior dual node remains", context=[lo.tolist(), hi.tolist()])
    values = np.where(dgrid.active, best, np.nan)
    gmap = np.where(dgrid.active[:, None], xi, np.nan)
    logger.debug("Legendre transform on %s dual nodes, %d masked", grid.shape, int(edge.sum()))
    return DualGridFn(grid=dgrid, values=values, gradient_map=gmap,
                      source=u if isinstance(u, SPotential) else None)


def _brute_force(x: np.ndarray, sample: ConvexSample) -> tuple[np.ndarray, np.ndarray]:
    m = len(sample.points)
    chunk = max(1, int(4_000_000 // max(m, 1)))
    best = np.empty(len(x))
    arg = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), chunk):
        stop = start + chunk
        scores = x[start:stop] @ sample.points.T - sample.values[None, :]
        arg[start:stop] = np.argmax(scores, axis=1)
        best[start:stop] = scores[np.arange(len(scores)), arg[start:stop]]
    return best, arg


def _feasible_steps(sample: ConvexSample, xi: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Range of t keeping ξ + t·e_axis in the evaluator's domain."""
    lo = np.full(len(xi), -np.inf)
    hi = np.full(len(xi), np.inf)
    if sample.domain is not None:
        dist = sample.domain.facet_distances(xi)
        coef = sample.domain.normals[:, axis]
        for k in range(sample.domain.n_facets):
            if coef[k] > 0:
                lo = np.maximum(lo, -dist[:, k] / coef[k])
            elif coef[k] < 0:
                hi = np.minimum(hi, dist[:, k] / -coef[k])
    if sample.box is not None:
        blo, bhi = sample.box
        lo = np.maximum(lo, blo[axis] - xi[:, axis])
        hi = np.minimum(hi, bhi[axis] - xi[:, axis])
    return lo, hi


def _polish_axis(sample, x, xi, best, axis, iterations, out):
    xi_all, best_all, live = out
    step = sample.h[axis]
    lo, hi = _feasible_steps(sample, xi, axis)
    span = np.minimum(hi, step) - np.maximum(lo, -step)
    a = np.maximum(lo, -step) + 1e-9 * span
    b = np.minimum(hi, step) - 1e-9 * span
    ok = b > a
    if not ok.any():
        return

    def objective(t):
        pts = xi[ok].copy()
        pts[:, axis] += t
        return np.einsum("mi,mi->m", x[ok], pts) - sample.evaluate(pts)

    a, b = a[ok], b[ok]
    for _ in range(iterations):
        c = b - GOLDEN * (b - a)
        d = a + GOLDEN * (b - a)
        left = objective(c) > objective(d)
        b = np.where(left, d, b)
        a = np.where(left, a, c)
    t = 0.5 * (a + b)
    value = objective(t)
    better = value > best[ok]
    rows = live[np.flatnonzero(ok)[better]]
    moved = xi[ok][better]
    moved[:, axis] += t[better]
    xi_all[rows] = moved
    best_all[rows] = value[better]


# ── Diagnostics ──────────────────────────────────────────────────────────

def _inner(grid: Grid, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Points whose surrounding dual cell lies inside the finite part of the grid."""
    usable = grid.active & np.isfinite(values)
    pts = grid.points[usable]
    if not len(pts):
        return np.zeros(len(points), dtype=bool)
    lo, hi = pts.min(axis=0) + grid.h, pts.max(axis=0) - grid.h
    return np.all((points >= lo) & (points <= hi), axis=1)


def evaluate_dual(f: DualGridFn, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    usable = f.grid.active & np.isfinite(f.values)
    return f.grid.interpolation_matrix(x, usable) @ np.nan_to_num(f.values)


def young_error(u: SPotential, f: DualGridFn, region_margin: Optional[float] = None) -> float:
    """max |u(ξ) + f(∇u(ξ)) − ⟨∇u(ξ), ξ⟩| over Interior nodes whose image is covered by f."""
    grid = u.grid
    nodes = grid.interior if region_margin is None else grid.interior & grid.mask(region_margin)
    xi = grid.points[nodes]
    x = u.gradient()[nodes]
    keep = _inner(f.grid, f.values, x)
    if not keep.any():
        raise DualBoxTooSmall("no normal-map image inside the dual grid")
    gap = u.values()[nodes][keep] + evaluate_dual(f, x[keep]) - np.einsum("mi,mi->m", x[keep], xi[keep])
    return float(np.abs(gap).max())


def involution_error(u: SPotential, f: DualGridFn, region_margin: Optional[float] = None) -> float:
    """max |f* − u| on the primal sample region, f* transformed back from the dual grid."""
    grid = u.grid
    region = grid.active if region_margin is None else grid.mask(region_margin)
    pts = grid.points[region]
    back = legendre_transform(ConvexSample.from_dual(f), dual_box=(pts.min(axis=0), pts.max(axis=0)),
                              dual_h=float(grid.h.min()))
    keep = _inner(back.grid, back.values, pts)
    if not keep.any():
        raise DualBoxTooSmall("no primal node inside the back-transformed grid")
    gap = evaluate_dual(back, pts[keep]) - u.values()[region][keep]
    logger.debug("Involution check over %d primal nodes", int(keep.sum()))
    return float(np.abs(gap).max())
