"""Tensor grids, finite differences and quadrature.

Nodes sit at cell centres of a uniform tensor grid over a box. A node is
Outside when its centre is not strictly inside the polytope, Band when one
of its 3ⁿ neighbours is Outside (or off the array), and Interior otherwise,
so every Interior node has the full centred stencil available.
"""

import itertools
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Union

import numpy as np
from scipy import ndimage, sparse
from scipy.spatial import cKDTree
from scipy.special import xlogy

from abreu_lab.config import get_settings
from abreu_lab.errors import DegenerateHessian, InvalidPolytope, TooCoarse
from abreu_lab.models import NodeKind
from abreu_lab.polytope import Polytope

logger = logging.getLogger(__name__)
settings = get_settings()

Sampler = Callable[[np.ndarray], np.ndarray]


def classify(outside: np.ndarray) -> np.ndarray:
    """NodeKind array from a boolean Outside array."""
    n = outside.ndim
    near = ndimage.binary_dilation(outside, structure=np.ones((3,) * n, dtype=bool), border_value=1)
    kind = np.full(outside.shape, NodeKind.interior, dtype=np.int8)
    kind[near] = NodeKind.band
    kind[outside] = NodeKind.outside
    return kind


@dataclass(frozen=True, eq=False)
class Grid:
    lo: np.ndarray
    h: np.ndarray
    shape: tuple[int, ...]
    kind: np.ndarray
    polytope: Optional[Polytope] = None

    # ── Construction ─────────────────────────────────────────────────────

    @classmethod
    def build(cls, polytope: Polytope, h: float) -> "Grid":
        lo, hi = polytope.bounding_box
        grid = cls.from_box(lo, hi, h, polytope=polytope)
        logger.debug(
            "Grid %s in dimension %d: %d interior, %d band nodes",
            grid.shape, polytope.dim, int(grid.interior.sum()), int(grid.band.sum()),
        )
        return grid

    @classmethod
    def from_box(
        cls,
        lo,
        hi,
        h: Union[float, np.ndarray],
        polytope: Optional[Polytope] = None,
        outside: Optional[np.ndarray] = None,
    ) -> "Grid":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if np.any(np.asarray(h) <= 0):
            raise TooCoarse("grid spacing must be positive", context=np.atleast_1d(h).tolist())
        cells = np.maximum(np.ceil((hi - lo) / h - 1e-9).astype(int), 1)
        if np.any(cells < 3):
            raise TooCoarse("grid needs at least three cells per axis", context=cells.tolist())
        step = (hi - lo) / cells
        shape = tuple(int(c) for c in cells)

        if outside is None:
            outside = np.zeros(shape, dtype=bool)
            if polytope is not None:
                centres = _centres(lo, step, shape)
                inside = np.all(polytope.facet_distances(centres) > 0, axis=1)
                outside = ~inside.reshape(shape)
        grid = cls(lo=lo, h=step, shape=shape, kind=classify(np.asarray(outside, dtype=bool)),
                   polytope=polytope)
        if not grid.interior.any():
            raise TooCoarse("no Interior node; refine the grid")
        return grid

    def with_outside(self, outside: np.ndarray) -> "Grid":
        return Grid(lo=self.lo, h=self.h, shape=self.shape,
                    kind=classify(outside.reshape(self.shape)), polytope=self.polytope)

    # ── Geometry ─────────────────────────────────────────────────────────

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def hi(self) -> np.ndarray:
        return self.lo + self.h * np.asarray(self.shape)

    @cached_property
    def axes(self) -> list[np.ndarray]:
        return [self.lo[i] + (np.arange(self.shape[i]) + 0.5) * self.h[i] for i in range(self.dim)]

    @cached_property
    def points(self) -> np.ndarray:
        return _centres(self.lo, self.h, self.shape)

    @cached_property
    def flat_kind(self) -> np.ndarray:
        return self.kind.ravel()

    @cached_property
    def interior(self) -> np.ndarray:
        return self.flat_kind == NodeKind.interior

    @cached_property
    def band(self) -> np.ndarray:
        return self.flat_kind == NodeKind.band

    @cached_property
    def active(self) -> np.ndarray:
        return self.flat_kind != NodeKind.outside

    @cached_property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @cached_property
    def volumes(self) -> np.ndarray:
        """Quadrature weights: cell volume clipped to the polytope, 0 Outside."""
        vol = np.where(self.active, self.cell_volume, 0.0)
        if self.polytope is None:
            return vol
        band = np.flatnonzero(self.band)
        if band.size:
            sub = 8
            offsets = (np.arange(sub) + 0.5) / sub - 0.5
            local = np.stack(np.meshgrid(*([offsets] * self.dim), indexing="ij"), axis=-1).reshape(-1, self.dim)
            for chunk in np.array_split(band, max(1, band.size // 2048)):
                pts = self.points[chunk, None, :] + local[None, :, :] * self.h
                inside = np.all(self.polytope.facet_distances(pts) > 0, axis=-1)
                vol[chunk] = self.cell_volume * inside.mean(axis=1)
        return vol

    def mask(self, margin: float) -> np.ndarray:
        """Active nodes with every δ_k ≥ margin (eroded interior mask)."""
        if self.polytope is None:
            return self.interior.copy()
        dist = self.polytope.facet_distances(self.points)
        return self.interior & np.all(dist >= margin, axis=1)

    def nearest(self, point) -> int:
        idx = np.clip(np.floor((np.asarray(point, dtype=float) - self.lo) / self.h).astype(int),
                      0, np.asarray(self.shape) - 1)
        return int(np.ravel_multi_index(tuple(idx), self.shape))

    def neighbour(self, offset) -> np.ndarray:
        """Flat index of node p + offset, −1 when off the array or not active."""
        key = tuple(int(o) for o in offset)
        cache = self.__dict__.setdefault("_neighbours", {})
        if key not in cache:
            idx = np.indices(self.shape).reshape(self.dim, -1) + np.asarray(key)[:, None]
            valid = np.all((idx >= 0) & (idx < np.asarray(self.shape)[:, None]), axis=0)
            flat = np.full(self.size, -1, dtype=np.int64)
            flat[valid] = np.ravel_multi_index(tuple(idx[:, valid]), self.shape)
            flat[valid] = np.where(self.active[flat[valid]], flat[valid], -1)
            cache[key] = flat
        return cache[key]

    # ── Finite-difference operators ──────────────────────────────────────

    def _assemble(self, stencils) -> tuple[sparse.csr_matrix, np.ndarray]:
        """First applicable stencil per active node, in priority order."""
        rows, cols, vals = [], [], []
        done = np.zeros(self.size, dtype=bool)
        for stencil in stencils:
            ok = self.active & ~done
            targets = []
            for offset, _ in stencil:
                t = self.neighbour(offset)
                ok &= t >= 0
                targets.append(t)
            idx = np.flatnonzero(ok)
            for (_, weight), t in zip(stencil, targets):
                rows.append(idx)
                cols.append(t[idx])
                vals.append(np.full(idx.size, weight))
            done |= ok
        mat = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.size, self.size),
        )
        return mat, done

    def _unit(self, axis: int, k: int = 1) -> tuple[int, ...]:
        e = [0] * self.dim
        e[axis] = k
        return tuple(e)

    @cached_property
    def first(self) -> list[tuple[sparse.csr_matrix, np.ndarray]]:
        ops = []
        for i in range(self.dim):
            h = self.h[i]
            e = lambda k, i=i: self._unit(i, k)  # noqa: E731
            ops.append(self._assemble([
                [(e(-1), -0.5 / h), (e(1), 0.5 / h)],
                [(e(0), -1.5 / h), (e(1), 2.0 / h), (e(2), -0.5 / h)],
                [(e(0), 1.5 / h), (e(-1), -2.0 / h), (e(-2), 0.5 / h)],
            ]))
        return ops

    @cached_property
    def second(self) -> dict[tuple[int, int], tuple[sparse.csr_matrix, np.ndarray]]:
        """D_ij for i ≤ j; D_ji is the same object."""
        ops: dict[tuple[int, int], tuple[sparse.csr_matrix, np.ndarray]] = {}
        for i in range(self.dim):
            h2 = self.h[i] ** 2
            e = lambda k, i=i: self._unit(i, k)  # noqa: E731
            ops[(i, i)] = self._assemble([
                [(e(-1), 1 / h2), (e(0), -2 / h2), (e(1), 1 / h2)],
                [(e(0), 2 / h2), (e(1), -5 / h2), (e(2), 4 / h2), (e(3), -1 / h2)],
                [(e(0), 2 / h2), (e(-1), -5 / h2), (e(-2), 4 / h2), (e(-3), -1 / h2)],
            ])
        for i, j in itertools.combinations(range(self.dim), 2):
            w = 0.25 / (self.h[i] * self.h[j])
            corner = lambda si, sj, i=i, j=j: tuple(  # noqa: E731
                si * (a == i) + sj * (a == j) for a in range(self.dim)
            )
            centred, avail = self._assemble([[
                (corner(1, 1), w), (corner(1, -1), -w), (corner(-1, 1), -w), (corner(-1, -1), w),
            ]])
            # composed one-sided first derivatives where the 4-point stencil is missing
            di, ai = self.first[i]
            dj, aj = self.first[j]
            reaches_gap = (abs(di) @ (~aj).astype(float)) > 0
            composed_rows = self.active & ~avail & ai & ~reaches_gap
            pick = sparse.diags(composed_rows.astype(float))
            keep = sparse.diags(avail.astype(float))
            mat = (keep @ centred + pick @ (di @ dj)).tocsr()
            mat.eliminate_zeros()
            ops[(i, j)] = (mat, avail | composed_rows)
            ops[(j, i)] = ops[(i, j)]
        return ops

    # ── Interpolation ────────────────────────────────────────────────────

    def interpolation_matrix(self, points, usable: Optional[np.ndarray] = None) -> sparse.csr_matrix:
        """Affine-exact interpolation/extrapolation of node values to points.

        Multilinear weights over the 2ⁿ nodes around each point when they are
        all usable; otherwise a least-squares affine fit over the nearest
        usable nodes.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        usable = self.active if usable is None else usable
        m, n = points.shape
        shape = np.asarray(self.shape)
        base = np.clip(np.floor((points - self.lo) / self.h - 0.5).astype(int), 0, shape - 2)
        t = (points - (self.lo + (base + 0.5) * self.h)) / self.h

        corners = list(itertools.product((0, 1), repeat=n))
        idx = np.empty((m, len(corners)), dtype=np.int64)
        wts = np.empty((m, len(corners)))
        for c, corner in enumerate(corners):
            corner = np.asarray(corner)
            idx[:, c] = np.ravel_multi_index(tuple((base + corner).T), self.shape)
            wts[:, c] = np.prod(np.where(corner == 1, t, 1.0 - t), axis=1)
        ok = usable[idx].all(axis=1)

        rows = [np.repeat(np.flatnonzero(ok), len(corners))]
        cols = [idx[ok].ravel()]
        vals = [wts[ok].ravel()]

        missing = np.flatnonzero(~ok)
        if missing.size:
            nodes = np.flatnonzero(usable)
            tree = cKDTree(self.points[nodes] / self.h)
            k = min(nodes.size, max(3 ** n, 2 * (n + 1)))
            _, near = tree.query(points[missing] / self.h, k=k)
            for r, nb in zip(missing, np.atleast_2d(near)):
                cand = nodes[nb]
                design = np.hstack([np.ones((cand.size, 1)), (self.points[cand] - points[r]) / self.h])
                rows.append(np.full(cand.size, r))
                cols.append(cand)
                vals.append(np.linalg.pinv(design)[0])
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(m, self.size),
        )

    # ── Boundary quadrature ──────────────────────────────────────────────

    @cached_property
    def boundary_rule(self) -> "BoundaryRule":
        if self.polytope is None:
            raise InvalidPolytope("boundary rule needs a polytope")
        return boundary_rule(self.polytope, float(self.h.min()))


def _centres(lo, h, shape) -> np.ndarray:
    axes = [lo[i] + (np.arange(shape[i]) + 0.5) * h[i] for i in range(len(shape))]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(shape))


# ── Grid functions ───────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class GridFn:
    grid: Grid
    values: np.ndarray  # flat, NaN on Outside nodes

    @classmethod
    def sample(cls, grid: Grid, fn: Sampler) -> "GridFn":
        values = np.full(grid.size, np.nan)
        values[grid.active] = np.asarray(fn(grid.points[grid.active]), dtype=float)
        return cls(grid=grid, values=values)

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "GridFn":
        return cls(grid=grid, values=np.where(grid.active, float(c), np.nan))

    def array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)


@dataclass(frozen=True)
class HessianField:
    hessian: np.ndarray   # (size, n, n)
    det: np.ndarray       # (size,)
    inverse: np.ndarray   # (size, n, n), NaN where det ≤ floor


def _require(grid: Grid, avail: np.ndarray) -> None:
    missing = np.flatnonzero(grid.interior & ~avail)
    if missing.size:
        raise TooCoarse("Interior node lacks a finite-difference stencil", context=missing.tolist())


def _apply(op: sparse.csr_matrix, avail: np.ndarray, values: np.ndarray) -> np.ndarray:
    filled = np.nan_to_num(values, nan=0.0)
    out = op @ filled
    # NaN wherever the stencil is missing or reads a NaN value
    bad = ~avail | ((abs(op) @ np.isnan(values).astype(float)) > 0)
    out[bad] = np.nan
    return out


def fd_gradient(g: GridFn) -> np.ndarray:
    """(size, n) gradient; centred on Interior, one-sided on Band."""
    grid = g.grid
    cols = []
    for op, avail in grid.first:
        _require(grid, avail)
        cols.append(_apply(op, avail, g.values))
    return np.stack(cols, axis=-1)


def fd_hessian(g: GridFn) -> np.ndarray:
    grid = g.grid
    n = grid.dim
    out = np.full((grid.size, n, n), np.nan)
    for i in range(n):
        for j in range(i, n):
            op, avail = grid.second[(i, j)]
            _require(grid, avail)
            out[:, i, j] = _apply(op, avail, g.values)
            out[:, j, i] = out[:, i, j]
    return out


def fd_third(g: GridFn) -> np.ndarray:
    """Max |∂_i∂_j∂_k g| over index triples, per node."""
    grid = g.grid
    best = np.zeros(grid.size)
    for k, (dk, ak) in enumerate(grid.first):
        for (i, j), (dij, aij) in grid.second.items():
            if i > j:
                continue
            inner = _apply(dij, aij, g.values)
            best = np.fmax(best, np.abs(_apply(dk, ak, inner)))
    best[~grid.active] = np.nan
    return best


def det_field(hess: np.ndarray) -> np.ndarray:
    n = hess.shape[-1]
    if n == 1:
        return hess[..., 0, 0].copy()
    if n == 2:
        return hess[..., 0, 0] * hess[..., 1, 1] - hess[..., 0, 1] * hess[..., 1, 0]
    if n == 3:
        return np.einsum("...i,...i->...", hess[..., :, 0], np.cross(hess[..., :, 1], hess[..., :, 2]))
    return np.linalg.det(hess)


def adjugate(hess: np.ndarray) -> np.ndarray:
    """Cofactor transpose, det·H⁻¹ for invertible H."""
    n = hess.shape[-1]
    if n == 1:
        return np.ones_like(hess)
    if n == 2:
        adj = np.empty_like(hess)
        adj[..., 0, 0] = hess[..., 1, 1]
        adj[..., 1, 1] = hess[..., 0, 0]
        adj[..., 0, 1] = -hess[..., 0, 1]
        adj[..., 1, 0] = -hess[..., 1, 0]
        return adj
    if n == 3:
        c0, c1, c2 = hess[..., :, 0], hess[..., :, 1], hess[..., :, 2]
        return np.stack([np.cross(c1, c2), np.cross(c2, c0), np.cross(c0, c1)], axis=-2)
    return det_field(hess)[..., None, None] * np.linalg.inv(hess)


def hessian_field(hess: np.ndarray, check: np.ndarray, det_floor: Optional[float] = None) -> HessianField:
    """det and inverse of a stacked Hessian; DegenerateHessian on checked nodes."""
    floor = settings.det_floor if det_floor is None else det_floor
    det = det_field(hess)
    bad = np.flatnonzero(check & ~(det > floor))
    if bad.size:
        raise DegenerateHessian(f"det(u_ij) <= {floor:g}", context=bad.tolist())
    ok = np.isfinite(det) & (det > floor)
    inverse = np.full_like(hess, np.nan)
    inverse[ok] = adjugate(hess[ok]) / det[ok][:, None, None]
    return HessianField(hessian=hess, det=det, inverse=inverse)


def fd_hessian_det(g: GridFn, det_floor: Optional[float] = None) -> HessianField:
    return hessian_field(fd_hessian(g), g.grid.interior, det_floor)


# ── Quadrature ───────────────────────────────────────────────────────────

def node_values(grid: Grid, x) -> np.ndarray:
    """Flat node values from a GridFn, a flat array, a sampler or a scalar."""
    if x is None:
        return np.where(grid.active, 1.0, 0.0)
    if isinstance(x, GridFn):
        return x.values
    if callable(x):
        return GridFn.sample(grid, x).values
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return np.where(grid.active, float(arr), np.nan)
    return arr


def interior_integral(grid: Grid, g, w=None) -> float:
    """Σ_nodes vol·g·w over Interior ∪ Band; Outside contributes 0."""
    act = grid.active
    prod = node_values(grid, g)[act] * node_values(grid, w)[act]
    return float(np.dot(grid.volumes[act], prod))


@dataclass(frozen=True, eq=False)
class BoundaryRule:
    points: np.ndarray   # (m, n)
    weights: np.ndarray  # (m,), sigma_scale included
    facet: np.ndarray    # (m,)


def boundary_rule(polytope: Polytope, h: float) -> BoundaryRule:
    """Per-facet midpoint rule; n = 1 uses the two endpoints."""
    n = polytope.dim
    pts, wts, fac = [], [], []
    for k in range(polytope.n_facets):
        scale = polytope.sigma_scale[k]
        verts = polytope.facet_vertices(k)
        if n == 1:
            p = polytope.offsets[k] / polytope.normals[k]
            pts.append(p[None, :])
            wts.append(np.array([scale]))
        elif n == 2:
            direction = np.array([-polytope.normals[k][1], polytope.normals[k][0]])
            order = np.argsort(verts @ direction)
            a, b = verts[order[0]], verts[order[-1]]
            length = float(np.linalg.norm(b - a))
            m = max(1, int(np.ceil(length / h)))
            s = (np.arange(m) + 0.5) / m
            pts.append(a + s[:, None] * (b - a))
            wts.append(np.full(m, scale * length / m))
        elif n == 3:
            p, w = _polygon_rule(polytope, k, verts, h)
            pts.append(p)
            wts.append(scale * w)
        else:
            raise InvalidPolytope("boundary quadrature supports dimensions 1 to 3", context=n)
        fac.append(np.full(len(wts[-1]), k))
    return BoundaryRule(points=np.vstack(pts), weights=np.concatenate(wts), facet=np.concatenate(fac))


def _polygon_rule(polytope: Polytope, k: int, verts: np.ndarray, h: float):
    _, basis = polytope.facet_frame(k)
    centre = verts.mean(axis=0)
    local = (verts - centre) @ basis
    ring = verts[np.argsort(np.arctan2(local[:, 1], local[:, 0]))]
    pts, wts = [], []
    for a, b in zip(ring, np.roll(ring, -1, axis=0)):
        # triangle (centre, a, b) split into m² congruent pieces
        e1, e2 = a - centre, b - centre
        area = 0.5 * np.linalg.norm(np.cross(e1, e2))
        m = max(1, int(np.ceil(max(np.linalg.norm(e1), np.linalg.norm(e2), np.linalg.norm(b - a)) / h)))
        up = [(i + 1 / 3, j + 1 / 3) for i in range(m) for j in range(m - i)]
        down = [(i + 2 / 3, j + 2 / 3) for i in range(m - 1) for j in range(m - 1 - i)]
        bary = np.array(up + down) / m
        pts.append(centre + bary[:, :1] * e1 + bary[:, 1:] * e2)
        wts.append(np.full(len(bary), area / m ** 2))
    return np.vstack(pts), np.concatenate(wts)


def boundary_integral(rule: BoundaryRule, g: Optional[Sampler] = None, w: Optional[Sampler] = None) -> float:
    """Σ weight·g·w over the boundary quadrature points."""
    gv = np.ones(len(rule.weights)) if g is None else np.asarray(g(rule.points), dtype=float)
    wv = np.ones(len(rule.weights)) if w is None else np.asarray(w(rule.points), dtype=float)
    return float(np.dot(rule.weights, gv * wv))


def log_collar_correction(grid: Grid, weight=None, kappa: Optional[float] = None) -> float:
    """Quadrature correction for integrands carrying + log δ_k near facet k.

    Replaces log δ_k at each collar node by its average over the cell's
    δ_k-range [δ − ρ/2, δ + ρ/2] (clipped at 0), ρ = Σ_i |a_ki| h_i.
    """
    poly = grid.polytope
    kappa = settings.collar_kappa if kappa is None else kappa
    act = np.flatnonzero(grid.active)
    wv = node_values(grid, weight)[act] * grid.volumes[act]
    dist = poly.facet_distances(grid.points[act])
    total = 0.0
    for k in range(poly.n_facets):
        rho = float(np.abs(poly.normals[k]) @ grid.h)
        delta = dist[:, k]
        sel = delta < kappa * rho
        if not sel.any():
            continue
        lo = np.maximum(delta[sel] - rho / 2, 0.0)
        hi = delta[sel] + rho / 2
        antider = lambda t: xlogy(t, t) - t  # noqa: E731
        mean = (antider(hi) - antider(lo)) / (hi - lo)
        total += float(np.dot(wv[sel], mean - np.log(delta[sel])))
    return total
