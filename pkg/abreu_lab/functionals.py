"""L_A, the Mabuchi functional, affine defects and the stability audit."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from abreu_lab.config import get_settings
from abreu_lab.errors import OutOfRange, PointOutside, RefusedAffineDefect
from abreu_lab.grid import Grid, GridFn, fd_hessian, hessian_field, log_collar_correction
from abreu_lab.models import FamilyConfig, Kink, StabilityReport, Witness
from abreu_lab.operator import DensityPair
from abreu_lab.polytope import Polytope
from abreu_lab.potentials import SPotential, guillemin_trace
from abreu_lab.rng import stream

logger = logging.getLogger(__name__)
settings = get_settings()

Sampler = Callable[[np.ndarray], np.ndarray]


def _grid_for(domain: Union[Polytope, Grid], h: float) -> Grid:
    return domain if isinstance(domain, Grid) else Grid.build(domain, h)


def boundary_trace(u: SPotential, points: np.ndarray) -> np.ndarray:
    """u on ∂Δ: analytic trace of v plus the affine-exact extrapolation of φ."""
    phi = u.grid.interpolation_matrix(points) @ np.nan_to_num(u.phi)
    if u.guillemin:
        phi = phi + guillemin_trace(u.polytope, points)
    return phi


# ── L_A and 𝓕_A ──────────────────────────────────────────────────────────

def l_functional(u: Union[SPotential, Sampler], dp: DensityPair, grid: Optional[Grid] = None) -> float:
    """∫_∂Δ u·D dσ − ∫_Δ A·u·D dμ.

    u is either an SPotential or a plain function of ξ, in which case the
    grid that carries the quadrature must be passed.
    """
    if isinstance(u, SPotential):
        grid = u.grid
        rule = grid.boundary_rule
        trace = boundary_trace(u, rule.points)
        nodes = u.values()
    else:
        if grid is None:
            raise ValueError("a grid is required for plain functions")
        rule = grid.boundary_rule
        trace = np.asarray(u(rule.points), dtype=float)
        nodes = GridFn.sample(grid, u).values
    d, a = dp.nodes(grid)
    act = grid.active
    boundary = float(np.dot(rule.weights, trace * dp.check(rule.points)))
    interior = float(np.dot(grid.volumes[act], a[act] * nodes[act] * d[act]))
    return boundary - interior


def mabuchi(u: SPotential, dp: DensityPair, det_floor: Optional[float] = None) -> float:
    """−∫ log det(u_ij)·D dμ + L_A(u).

    Band cells use the analytic Hessian of v only; the log-singular collar
    correction applies when u carries the Guillemin part.
    """
    grid = u.grid
    hf = hessian_field(u.hessian(phi_on_band=False), grid.interior, det_floor)
    d, _ = dp.nodes(grid)
    act = grid.active
    energy = -float(np.dot(grid.volumes[act], np.log(hf.det[act]) * d[act]))
    if u.guillemin:
        energy += log_collar_correction(grid, weight=d)
    return energy + l_functional(u, dp)


# ── Affine defect ────────────────────────────────────────────────────────

def affine_basis(dim: int) -> list[tuple[str, Sampler]]:
    basis: list[tuple[str, Sampler]] = [("1", lambda pts: np.ones(len(np.atleast_2d(pts))))]
    for i in range(dim):
        basis.append((f"xi_{i + 1}", lambda pts, i=i: np.atleast_2d(pts)[:, i]))
    return basis


def affine_defect(domain: Union[Polytope, Grid], dp: DensityPair, h: float = 1 / 64) -> np.ndarray:
    """|L_A| on the affine basis {1, ξ_1, …, ξ_n}."""
    grid = _grid_for(domain, h)
    return np.array([abs(l_functional(fn, dp, grid)) for _, fn in affine_basis(grid.dim)])


def defect_tolerance(grid: Grid, dp: DensityPair, rel_tol: Optional[float] = None) -> float:
    """rel_tol·(1 + |∫ A D dμ|), rel_tol defaulting to the settings value."""
    d, a = dp.nodes(grid)
    act = grid.active
    mass = float(np.dot(grid.volumes[act], a[act] * d[act]))
    rel_tol = settings.defect_rel_tol if rel_tol is None else rel_tol
    return rel_tol * (1.0 + abs(mass))


def check_affine_defect(
    grid: Grid, dp: DensityPair, allow: bool = False, rel_tol: Optional[float] = None,
) -> np.ndarray:
    """Affine defect vector; RefusedAffineDefect when it exceeds the tolerance."""
    defect = affine_defect(grid, dp)
    tol = defect_tolerance(grid, dp, rel_tol)
    bad = [(name, float(value)) for (name, _), value in zip(affine_basis(grid.dim), defect) if value > tol]
    if bad:
        listing = ", ".join(f"L_A({name}) = {value:.6g}" for name, value in bad)
        if not allow:
            logger.warning("Refusing unbalanced data: %s", listing)
            raise RefusedAffineDefect(f"L_A does not vanish on affine functions: {listing}",
                                      context=f"tolerance {tol:.3g}")
        logger.warning("Proceeding with unbalanced data: %s", listing)
    return defect


# ── Stability audit ──────────────────────────────────────────────────────

@dataclass(frozen=True)
class _Quadrature:
    """Node and boundary weights so that L_A(u) = ⟨wb, u_b⟩ − ⟨wi, u_i⟩."""

    nodes: np.ndarray      # active node coordinates
    interior_w: np.ndarray  # vol·A·D
    bpoints: np.ndarray
    boundary_w: np.ndarray  # σ·D

    @classmethod
    def build(cls, grid: Grid, dp: DensityPair) -> "_Quadrature":
        d, a = dp.nodes(grid)
        act = grid.active
        rule = grid.boundary_rule
        return cls(
            nodes=grid.points[act],
            interior_w=grid.volumes[act] * a[act] * d[act],
            bpoints=rule.points,
            boundary_w=rule.weights * dp.check(rule.points),
        )

    def ratio(self, kinks: Sequence[Kink]) -> Optional[float]:
        interior = np.zeros(len(self.nodes))
        boundary = np.zeros(len(self.bpoints))
        for kink in kinks:
            b = np.asarray(kink.normal)
            interior += np.maximum(0.0, self.nodes @ b - kink.offset)
            boundary += np.maximum(0.0, self.bpoints @ b - kink.offset)
        denominator = float(np.dot(self.boundary_w, boundary))
        if denominator <= 1e-14:
            return None
        return (denominator - float(np.dot(self.interior_w, interior))) / denominator


def _draw_member(rng: np.random.Generator, kinks: int, p_o: np.ndarray, vertices: np.ndarray) -> list[Kink]:
    n = p_o.size
    out = []
    for _ in range(kinks):
        if n == 1:
            b = np.array([1.0 if rng.integers(2) else -1.0])
        else:
            b = rng.normal(size=n)
            b /= np.linalg.norm(b)
        s = rng.random()
        lo = float(b @ p_o)
        hi = float((vertices @ b).max())
        out.append(Kink(normal=b.tolist(), offset=lo + s * (hi - lo)))
    return out


def family_members(family: FamilyConfig, seed: int, p_o, vertices) -> list[tuple[int, int, list[Kink]]]:
    """Tiers k = 1..max_kinks with `samples` members each, one stream per tier."""
    p_o = np.asarray(p_o, dtype=float)
    members = []
    for tier in range(1, family.max_kinks + 1):
        rng = stream(seed, f"stability/{tier}")
        for member in range(family.samples):
            members.append((tier, member, _draw_member(rng, tier, p_o, vertices)))
    return members


def stability_lambda(
    domain: Union[Polytope, Grid],
    dp: DensityPair,
    family: FamilyConfig,
    seed: int,
    p_o=None,
    h: float = 1 / 64,
    defect_rel_tol: Optional[float] = None,
) -> StabilityReport:
    """Family infimum of L_A(u)/∫_∂Δ u·D dσ over normalized PL convex functions."""
    grid = _grid_for(domain, h)
    poly = grid.polytope
    p_o = poly.interior_point if p_o is None else np.asarray(p_o, dtype=float)
    defect = check_affine_defect(grid, dp, allow=family.allow_affine_defect, rel_tol=defect_rel_tol)
    quad = _Quadrature.build(grid, dp)
    members = family_members(family, seed, p_o, poly.vertices)

    with ThreadPoolExecutor(max_workers=settings.threads) as pool:
        ratios = list(pool.map(lambda m: quad.ratio(m[2]), members))

    best = None
    evaluated = 0
    for (tier, member, kinks), ratio in zip(members, ratios):
        if ratio is None:
            continue
        evaluated += 1
        if best is None or ratio < best[0]:
            best = (ratio, tier, member, kinks)
    if best is None:
        raise OutOfRange("no family member has a positive boundary integral", context=p_o.tolist(),
                         module="functionals")
    ratio, tier, member, kinks = best
    logger.info("Family infimum %.6f from tier %d member %d (%d evaluated)", ratio, tier, member, evaluated)
    return StabilityReport(
        lambda_hat=ratio,
        witness=Witness(tier=tier, member=member, kinks=kinks, ratio=ratio),
        affine_defect=defect.tolist(),
        samples=family.samples,
        members_evaluated=evaluated,
        seed=seed,
        p_o=p_o.tolist(),
    )


def replay_witness(domain: Union[Polytope, Grid], dp: DensityPair, witness: Witness, h: float = 1 / 64) -> float:
    """Ratio of a stored PL function."""
    grid = _grid_for(domain, h)
    ratio = _Quadrature.build(grid, dp).ratio(witness.kinks)
    if ratio is None:
        raise OutOfRange("witness vanishes on the boundary", module="functionals")
    return ratio


# ── Segment measure ──────────────────────────────────────────────────────

def _segment_sampler(u, a: np.ndarray, b: np.ndarray) -> tuple[Callable[[np.ndarray], np.ndarray], float]:
    length = float(np.linalg.norm(b - a))
    direction = (b - a) / length
    fn = u.evaluate if isinstance(u, SPotential) else u

    def w(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.asarray(fn(a[None, :] + t[:, None] * direction[None, :]), dtype=float)

    return w, length


def _slope(w, t: float, step: float, side: int) -> float:
    f0, f1, f2 = w([t, t + side * step, t + 2 * side * step])
    return side * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * step)


def ma_segment_measure(u, segment, part=None, step: Optional[float] = None) -> float:
    """Length of the subgradient image of w = u restricted to a segment.

    segment is a pair of endpoints in Δ; the restriction is parametrised by
    arclength t ∈ [0, L]. part is None (the whole segment), a pair (t0, t1)
    or a list of points, for which the slope jumps are summed.
    """
    a, b = (np.asarray(p, dtype=float).ravel() for p in segment)
    if isinstance(u, SPotential):
        for end in (a, b):
            if np.any(u.polytope.facet_distances(end) <= 0):
                raise PointOutside("segment must lie inside the polytope", context=end.tolist(),
                                   module="functionals")
    w, length = _segment_sampler(u, a, b)
    step = 1e-4 * length if step is None else step

    if part is not None and not (isinstance(part, tuple) and len(part) == 2):
        total = 0.0
        for t in np.atleast_1d(np.asarray(part, dtype=float)):
            total += _slope(w, t, step, +1) - _slope(w, t, step, -1)
        return float(total)

    t0, t1 = (0.0, length) if part is None else (float(part[0]), float(part[1]))
    left = _slope(w, t0, step, -1) if t0 - 2 * step >= 0 else _slope(w, t0, step, +1)
    right = _slope(w, t1, step, +1) if t1 + 2 * step <= length else _slope(w, t1, step, -1)
    return float(right - left)


def segment_stability_ratio(w: Sampler, segment, dp: DensityPair, grid: Grid) -> float:
    """L_A(w)/N(I) for a convex test function and a segment inside Δ."""
    return l_functional(w, dp, grid) / ma_segment_measure(w, segment)


# ── Boundary mass and pairing ────────────────────────────────────────────

@dataclass(frozen=True)
class BoundaryMass:
    lhs: float
    rhs: float
    holds: bool


def boundary_mass_bound(u: SPotential, dp: DensityPair, lam: float) -> BoundaryMass:
    """∫_∂Δ u dσ against n·λ⁻¹·(max D/min D)·Vol(Δ)."""
    grid = u.grid
    rule = grid.boundary_rule
    lhs = float(np.dot(rule.weights, boundary_trace(u, rule.points)))
    if not lam > 0:
        return BoundaryMass(lhs=lhs, rhs=float("nan"), holds=False)
    d, _ = dp.nodes(grid)
    d = np.concatenate([d[grid.active], dp.check(rule.points)])
    volume = float(grid.volumes.sum())
    rhs = grid.dim / lam * float(d.max() / d.min()) * volume
    return BoundaryMass(lhs=lhs, rhs=rhs, holds=lhs <= rhs)


@dataclass(frozen=True)
class Pairing:
    lhs: float   # L_A(w)
    rhs: float   # ∫ u^{ij} w_ij D dμ
    gap: float


def solution_pairing(u: SPotential, dp: DensityPair, w: Sampler) -> Pairing:
    """L_A(w) against ∫ u^{ij} w_ij D dμ, equal for a solution u."""
    grid = u.grid
    lhs = l_functional(w, dp, grid)
    hf = u.hessian_field()
    w_hess = fd_hessian(GridFn.sample(grid, w))
    d, _ = dp.nodes(grid)
    act = grid.active & np.isfinite(hf.inverse).all(axis=(1, 2)) & np.isfinite(w_hess).all(axis=(1, 2))
    trace = np.einsum("mij,mij->m", hf.inverse[act], w_hess[act])
    rhs = float(np.dot(grid.volumes[act], trace * d[act]))
    return Pairing(lhs=lhs, rhs=rhs, gap=abs(lhs - rhs))


def identity_target(grid: Grid, dp: DensityPair) -> float:
    """n∫_Δ D dμ"""
    d, _ = dp.nodes(grid)
    act = grid.active
    return grid.dim * float(np.dot(grid.volumes[act], d[act]))
