"""Guillemin potential, class-S potentials u = v + φ, sections and barriers."""

import logging
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy import ndimage
from scipy.special import xlogy

from abreu_lab.config import get_settings
from abreu_lab.errors import NotConvex, OutOfRange, PointOutside, ScheduleDegenerate
from abreu_lab.grid import Grid, GridFn, HessianField, det_field, fd_gradient, fd_hessian, hessian_field
from abreu_lab.models import BarrierKind
from abreu_lab.polytope import Polytope

logger = logging.getLogger(__name__)
settings = get_settings()


# ── Guillemin potential ──────────────────────────────────────────────────

@dataclass(frozen=True)
class GuilleminValue:
    value: np.ndarray
    gradient: np.ndarray
    hessian: np.ndarray
    det: np.ndarray


def _strict_distances(polytope: Polytope, xi: np.ndarray) -> np.ndarray:
    dist = polytope.facet_distances(xi)
    bad = np.flatnonzero((dist <= 0).any(axis=1))
    if bad.size:
        context = xi[bad[0]].tolist() if bad.size == 1 else bad.tolist()
        raise PointOutside("Guillemin potential needs strictly interior points", context=context)
    return dist


def guillemin_eval(polytope: Polytope, xi) -> GuilleminValue:
    """v = Σ δ_k log δ_k with exact gradient, Hessian and determinant."""
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    pts = np.atleast_2d(xi)
    dist = _strict_distances(polytope, pts)
    a = polytope.normals
    value = xlogy(dist, dist).sum(axis=1)
    grad = (1.0 + np.log(dist)) @ a
    hess = np.einsum("mk,ki,kj->mij", 1.0 / dist, a, a)
    det = det_field(hess)
    if single:
        return GuilleminValue(value[0], grad[0], hess[0], det[0])
    return GuilleminValue(value, grad, hess, det)


def guillemin_trace(polytope: Polytope, xi) -> np.ndarray:
    """Values of v on the closed polytope, δ log δ taken as 0 on facets."""
    dist = np.maximum(polytope.facet_distances(np.atleast_2d(xi)), 0.0)
    return xlogy(dist, dist).sum(axis=1)


def guillemin_det_product(polytope: Polytope, xi):
    """det(v_ij)·Π_k δ_k, identically 1 on boxes."""
    xi = np.asarray(xi, dtype=float)
    pts = np.atleast_2d(xi)
    dist = _strict_distances(polytope, pts)
    out = guillemin_eval(polytope, pts).det * np.prod(dist, axis=1)
    return out[0] if xi.ndim == 1 else out


# ── Class-S potentials ───────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class SPotential:
    """u = v + φ with v analytic (or absent) and φ a node field."""

    grid: Grid
    phi: np.ndarray
    p_o: np.ndarray
    guillemin: bool = True

    @classmethod
    def initial(cls, grid: Grid, p_o, guillemin: bool = True) -> "SPotential":
        return cls(grid=grid, phi=np.where(grid.active, 0.0, np.nan),
                   p_o=np.asarray(p_o, dtype=float), guillemin=guillemin)

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray], np.ndarray], p_o,
                      guillemin: bool = False) -> "SPotential":
        return cls(grid=grid, phi=GridFn.sample(grid, fn).values,
                   p_o=np.asarray(p_o, dtype=float), guillemin=guillemin)

    def with_phi(self, phi: np.ndarray) -> "SPotential":
        return SPotential(grid=self.grid, phi=phi, p_o=self.p_o, guillemin=self.guillemin)

    @property
    def polytope(self) -> Polytope:
        return self.grid.polytope

    @property
    def dim(self) -> int:
        return self.grid.dim

    # Guillemin part at the active nodes; zeros when absent
    @cached_property
    def v_nodes(self) -> GuilleminValue:
        grid = self.grid
        n = grid.dim
        value = np.full(grid.size, np.nan)
        grad = np.full((grid.size, n), np.nan)
        hess = np.full((grid.size, n, n), np.nan)
        act = grid.active
        if self.guillemin:
            g = guillemin_eval(self.polytope, grid.points[act])
            value[act], grad[act], hess[act] = g.value, g.gradient, g.hessian
        else:
            value[act], grad[act], hess[act] = 0.0, 0.0, 0.0
        return GuilleminValue(value, grad, hess, det_field(hess))

    @cached_property
    def phi_fn(self) -> GridFn:
        return GridFn(self.grid, self.phi)

    def values(self) -> np.ndarray:
        return self.v_nodes.value + self.phi

    def gradient(self) -> np.ndarray:
        return self.v_nodes.gradient + fd_gradient(self.phi_fn)

    def hessian(self, phi_on_band: bool = True) -> np.ndarray:
        phi_hess = fd_hessian(self.phi_fn)
        if not phi_on_band:
            phi_hess[self.grid.band] = 0.0
        return self.v_nodes.hessian + phi_hess

    def hessian_field(self, det_floor: Optional[float] = None) -> HessianField:
        return hessian_field(self.hessian(), self.grid.interior, det_floor)

    def v_at(self, points) -> np.ndarray:
        pts = np.atleast_2d(points)
        if not self.guillemin:
            return np.zeros(len(pts))
        return guillemin_eval(self.polytope, pts).value

    def phi_at(self, points) -> np.ndarray:
        pts = np.atleast_2d(points)
        return self.grid.interpolation_matrix(pts) @ np.nan_to_num(self.phi)

    def evaluate(self, points) -> np.ndarray:
        return self.v_at(points) + self.phi_at(points)

    def gradient_at(self, points) -> np.ndarray:
        pts = np.atleast_2d(points)
        dphi = fd_gradient(self.phi_fn)
        usable = self.grid.active & np.isfinite(dphi).all(axis=1)
        interp = self.grid.interpolation_matrix(pts, usable)
        out = interp @ np.nan_to_num(dphi)
        if self.guillemin:
            out = out + guillemin_eval(self.polytope, pts).gradient
        return out

    def hessian_at(self, points) -> np.ndarray:
        pts = np.atleast_2d(points)
        n = self.dim
        hphi = fd_hessian(self.phi_fn).reshape(self.grid.size, n * n)
        usable = self.grid.active & np.isfinite(hphi).all(axis=1)
        interp = self.grid.interpolation_matrix(pts, usable)
        out = (interp @ np.nan_to_num(hphi)).reshape(-1, n, n)
        if self.guillemin:
            out = out + guillemin_eval(self.polytope, pts).hessian
        return out


def is_convex(u: SPotential, tol: float = 1e-9) -> np.ndarray:
    """Interior nodes whose Hessian fails the PSD check."""
    grid = u.grid
    nodes = np.flatnonzero(grid.interior)
    eig = np.linalg.eigvalsh(u.hessian()[nodes])
    scale = 1.0 + np.abs(eig).max(axis=1)
    return nodes[~(eig.min(axis=1) >= -tol * scale)]


def normalize_at(u: SPotential, p=None) -> SPotential:
    """Subtract the supporting affine function at p (default p_o) from φ."""
    p = u.p_o if p is None else np.asarray(p, dtype=float)
    bad = is_convex(u)
    if bad.size:
        raise NotConvex("Hessian not positive semidefinite", context=bad.tolist())
    value = float(u.evaluate(p)[0])
    grad = u.gradient_at(p)[0]
    grid = u.grid
    shift = value + (grid.points - p) @ grad
    phi = np.where(grid.active, u.phi - shift, np.nan)
    logger.debug("Normalized at %s: removed value %.3e, |grad| %.3e", p.tolist(), value, np.abs(grad).max())
    return SPotential(grid=grid, phi=phi, p_o=p, guillemin=u.guillemin)


# ── Sections ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Section:
    mask: np.ndarray
    is_compact: bool
    level: float


@dataclass(frozen=True)
class SectionRadii:
    inner: float
    outer: float


def section(u: SPotential, p, C: float) -> Section:
    """Connected component of {u ≤ C} containing p; compact iff it avoids Band."""
    grid = u.grid
    below = grid.active & (u.values() <= C)
    labels, _ = ndimage.label(below.reshape(grid.shape), structure=np.ones((3,) * grid.dim))
    labels = labels.ravel()
    start = labels[grid.nearest(p)]
    if start == 0:
        return Section(mask=np.zeros(grid.size, dtype=bool), is_compact=True, level=C)
    mask = labels == start
    return Section(mask=mask, is_compact=not bool(np.any(mask & grid.band)), level=C)


def section_radii(u: SPotential, p, sec: Section) -> SectionRadii:
    """Radii r ≤ b with D_r(p) ⊂ S ⊂ D_b(p) at node resolution."""
    grid = u.grid
    dist = np.linalg.norm(grid.points - np.asarray(p, dtype=float), axis=1)
    if not sec.mask.any():
        return SectionRadii(0.0, 0.0)
    outer = float(dist[sec.mask].max())
    excluded = grid.active & ~sec.mask
    inner = float(dist[excluded].min()) if excluded.any() else outer
    return SectionRadii(inner=min(inner, outer), outer=outer)


# ── Barriers ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class BarrierSpec:
    kind: BarrierKind
    dim: int
    alpha: float
    beta: float
    C: float
    a: Optional[float] = None

    @property
    def m(self) -> int:
        return 8 * self.dim

    @property
    def reach(self) -> float:
        """Containment bound C/m on ξ₁ and Σ_{j≥2} ξ_j²."""
        return self.C / self.m

    @classmethod
    def build(
        cls,
        kind: BarrierKind,
        dim: int,
        alpha: float,
        beta: float = 0.5,
        C: Optional[float] = None,
        a: Optional[float] = None,
        polytope: Optional[Polytope] = None,
        slack: float = 1.1,
    ) -> "BarrierSpec":
        if dim < 2:
            raise OutOfRange("barriers need n >= 2", context=dim)
        m = 8 * dim
        if polytope is not None:
            verts = polytope.vertices
        else:
            verts = Polytope.unit_cube(dim).vertices
        xi1 = verts[:, 0]
        tail = (verts[:, 1:] ** 2).sum(axis=1)
        if C is None:
            C = m * (1.0 + float(np.max(np.maximum(xi1, tail))))
        if np.any(xi1 > C / m) or np.any(tail > C / m):
            raise OutOfRange("polytope is not inside {ξ₁ ≤ C/m} ∩ {Σξ_j² ≤ C/m}", context=C)

        if kind == BarrierKind.edge:
            lo, hi = 1 / (2 * dim), 1 - 1 / (2 * dim)
            if not (lo <= alpha <= hi and lo <= beta <= hi):
                raise OutOfRange(f"edge barrier exponents must lie in [{lo:g}, {hi:g}]",
                                 context=[alpha, beta])
            return cls(kind=kind, dim=dim, alpha=alpha, beta=beta, C=C)

        if alpha <= 1:
            raise OutOfRange("linear-cap barrier needs alpha > 1", context=alpha)
        reach = C / m
        needed = reach ** (alpha - 1) * (C + reach)
        if a is None:
            a = needed * slack
        elif a < needed:
            raise OutOfRange("a too small for v' <= 0 on the admissible region", context=[a, needed])
        return cls(kind=kind, dim=dim, alpha=alpha, beta=beta, C=C, a=a)


@dataclass(frozen=True)
class BarrierValue:
    value: np.ndarray
    hessian: np.ndarray
    det: np.ndarray
    cross: np.ndarray      # v_12 in the rotated frame (edge barrier)
    det_gap: np.ndarray    # A − B (edge barrier)


def barrier_eval(spec: BarrierSpec, xi) -> BarrierValue:
    """Closed-form value, Hessian and determinant of a barrier."""
    xi = np.asarray(xi, dtype=float)
    pts = np.atleast_2d(xi)
    if pts.shape[1] != spec.dim:
        raise OutOfRange("point dimension does not match the barrier", context=pts.shape[1])
    x1 = pts[:, 0]
    tail = pts[:, 1:]
    s = (tail ** 2).sum(axis=1)
    bad = np.flatnonzero(~((x1 > 0) & (x1 < spec.C) & (s < spec.C)))
    if bad.size:
        raise OutOfRange("point outside 0 < ξ₁ < C, Σξ_j² < C", context=bad.tolist())

    if spec.kind == BarrierKind.edge:
        out = _edge(spec, x1, tail, s)
    else:
        out = _linear_cap(spec, x1, tail, s)
    if xi.ndim == 1:
        return BarrierValue(*(f[0] for f in (out.value, out.hessian, out.det, out.cross, out.det_gap)))
    return out


def _edge(spec: BarrierSpec, x1, tail, s) -> BarrierValue:
    al, be, C, n = spec.alpha, spec.beta, spec.C, spec.dim
    r = np.sqrt(s)
    E = C - s
    w = x1 ** al * (C - x1) ** be * E ** be
    g1 = al / x1 - be / (C - x1)
    v11 = -w * (g1 ** 2 - al / x1 ** 2 - be / (C - x1) ** 2)
    v12 = 2 * be * w * g1 * r / E
    v22 = w * (2 * be / E + 4 * be * (1 - be) * s / E ** 2)
    vii = 2 * be * w / E
    gap = v11 * v22 - v12 ** 2
    det = gap * vii ** (n - 2)

    # rotated frame: point reads (ξ₁, r, 0, …, 0)
    hrot = np.zeros((len(x1), n, n))
    hrot[:, 0, 0] = v11
    hrot[:, 0, 1] = hrot[:, 1, 0] = v12
    hrot[:, 1, 1] = v22
    for i in range(2, n):
        hrot[:, i, i] = vii
    rot = _householder(tail, r)
    hess = np.einsum("mai,mij,mbj->mab", rot, hrot, rot)
    return BarrierValue(value=-w, hessian=hess, det=det, cross=v12, det_gap=gap)


def _householder(tail: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Block rotation R = diag(1, Q), Q symmetric with Q·tail = r·e₁."""
    m, k = tail.shape
    u = tail.copy()
    u[:, 0] -= r
    norm2 = (u ** 2).sum(axis=1)
    q = np.broadcast_to(np.eye(k), (m, k, k)).copy()
    live = norm2 > 1e-300
    q[live] -= 2 * np.einsum("mi,mj->mij", u[live], u[live]) / norm2[live][:, None, None]
    rot = np.zeros((m, k + 1, k + 1))
    rot[:, 0, 0] = 1.0
    rot[:, 1:, 1:] = q
    return rot


def _linear_cap(spec: BarrierSpec, x1, tail, s) -> BarrierValue:
    al, C, n, a = spec.alpha, spec.C, spec.dim, spec.a
    value = x1 ** al * (C + s) - a * x1
    hess = np.zeros((len(x1), n, n))
    hess[:, 0, 0] = al * (al - 1) * x1 ** (al - 2) * (C + s)
    hess[:, 0, 1:] = 2 * al * (x1 ** (al - 1))[:, None] * tail
    hess[:, 1:, 0] = hess[:, 0, 1:]
    for j in range(1, n):
        hess[:, j, j] = 2 * x1 ** al
    det = 2 ** (n - 1) * (al * (al - 1) * (C + s) - 2 * al ** 2 * s) * x1 ** (n * al - 2)
    return BarrierValue(value=value, hessian=hess, det=det,
                        cross=np.zeros_like(x1), det_gap=np.full_like(x1, np.nan))


def edge_gap_bound(spec: BarrierSpec, xi) -> np.ndarray:
    """Lower bound on A − B valid where the containment bounds hold."""
    pts = np.atleast_2d(np.asarray(xi, dtype=float))
    x1 = pts[:, 0]
    s = (pts[:, 1:] ** 2).sum(axis=1)
    al, be, C, n = spec.alpha, spec.beta, spec.C, spec.dim
    w = x1 ** al * (C - x1) ** be * (C - s) ** be
    return al * be * w ** 2 * C * (2 * n - 1) / (2 * n * spec.m * x1 ** 2 * (C - s) ** 2)


def sample_admissible(spec: BarrierSpec, count: int, rng: np.random.Generator,
                      xi1_floor: float = 0.1, on_axis: bool = False) -> np.ndarray:
    """Points with ξ₁ ∈ [xi1_floor, C/m] and Σ_{j≥2} ξ_j² ≤ C/m."""
    reach = spec.reach
    lo = min(xi1_floor, 0.5 * reach)
    x1 = rng.uniform(lo, reach, size=count)
    k = spec.dim - 1
    direction = rng.normal(size=(count, k))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = np.sqrt(reach) * rng.uniform(0.0, 1.0, size=count) ** (1.0 / k)
    tail = 0.0 * direction if on_axis else direction * radius[:, None]
    return np.column_stack([x1, tail])


@dataclass(frozen=True)
class AlphaSchedule:
    alphas: list[Fraction]
    k_star: int


def alpha_schedule(n: int) -> AlphaSchedule:
    """α_k = 2/n + (1 − 1/n)·α_{k−1}, α_0 = 0, up to the first α_k ≥ 1 − 1/n."""
    if n < 2:
        raise OutOfRange("schedule needs n >= 2", context=n)
    ceiling = 1 - Fraction(1, n)
    rate = Fraction(n - 1, n)
    alphas = [Fraction(2, n)]
    if alphas[0] >= ceiling:
        raise ScheduleDegenerate(
            f"alpha_1 = {alphas[0]} already reaches 1 - 1/n = {ceiling}", context=n,
        )
    while alphas[-1] < ceiling:
        alphas.append(Fraction(2, n) + rate * alphas[-1])
    return AlphaSchedule(alphas=alphas, k_star=len(alphas) - 1)
