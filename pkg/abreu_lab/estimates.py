"""Measured constants of the determinant estimates.

Every report carries the constant at two or more resolutions; a report
passes only when the constant meets its threshold and moves by at most
`thresholds.h_stability` (relative) between the two finest levels.
"""

import logging
from typing import Callable, Optional, Sequence, Union

import numpy as np

from abreu_lab.errors import DualUnavailable
from abreu_lab.functionals import boundary_trace
from abreu_lab.grid import Grid, det_field
from abreu_lab.legendre import DualGridFn, legendre_transform
from abreu_lab.models import BarrierKind, EstimateConfig, EstimateReport, LegendreConfig, Thresholds
from abreu_lab.operator import DensityPair
from abreu_lab.polytope import Polytope
from abreu_lab.potentials import (
    BarrierSpec, SPotential, barrier_eval, edge_gap_bound, guillemin_det_product,
    guillemin_eval, normalize_at, sample_admissible, section,
)
from abreu_lab.rng import stream

logger = logging.getLogger(__name__)

PotentialSource = Union[SPotential, Callable[[float], SPotential]]


# ── Refinement helpers ───────────────────────────────────────────────────

def convergence_order(hs: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log error against log h."""
    return float(np.polyfit(np.log(hs), np.log(errors), 1)[0])


def h_stable(trend: Sequence[tuple[float, float]], tol: float) -> bool:
    if len(trend) < 2:
        return False
    (_, coarse), (_, fine) = trend[-2], trend[-1]
    if not (np.isfinite(coarse) and np.isfinite(fine)):
        return False
    return abs(fine - coarse) <= tol * max(abs(fine), 1e-300)


def resample(u: SPotential, h: float) -> SPotential:
    """The same potential with φ interpolated onto a grid of spacing h."""
    grid = Grid.build(u.polytope, h)
    phi = np.full(grid.size, np.nan)
    phi[grid.active] = u.phi_at(grid.points[grid.active])
    return SPotential(grid=grid, phi=phi, p_o=u.p_o, guillemin=u.guillemin)


def levels(u: PotentialSource, refinements: Sequence[float]) -> list[tuple[float, SPotential]]:
    """(h, potential) pairs, coarse to fine."""
    if isinstance(u, SPotential):
        h = float(u.grid.h.max())
        return [(2 * h, resample(u, 2 * h)), (h, u)]
    return [(h, u(h)) for h in sorted(refinements, reverse=True)]


# ── Lower bounds ─────────────────────────────────────────────────────────

def _facet_probes(polytope: Polytope, k: int, h: float, count: int = 12) -> tuple[np.ndarray, np.ndarray]:
    """Points along the inward normal from the centroid of facet k, with their δ_k."""
    a = polytope.normals[k]
    norm = float(np.linalg.norm(a))
    centroid = polytope.facet_vertices(k).mean(axis=0)
    deltas = np.geomspace(2 * h, 0.1, count)
    return centroid + (deltas / norm ** 2)[:, None] * a, deltas


def det_lower_report(
    u: PotentialSource,
    dp: DensityPair,
    cfg: EstimateConfig = EstimateConfig(),
    thresholds: Thresholds = Thresholds(),
) -> tuple[EstimateReport, EstimateReport]:
    """min det(u_ij)·(sup A)ⁿ on the eroded mask, and the facet edge slopes."""
    pots = levels(u, cfg.refinements)
    margin = cfg.margin

    scaled = []
    sup_a = None
    for h, pot in pots:
        grid = pot.grid
        sup_a = dp.sup_a(grid)
        det = pot.hessian_field().det[grid.mask(margin)]
        scaled.append((h, float(det.min()) * sup_a ** grid.dim if sup_a > 0 else float("nan")))
    region = f"{{delta_k >= {margin:g}}}"
    if not sup_a > 0:
        lower = EstimateReport(
            name="det_lower", measured_constant=None, region=region,
            h_refinement_trend=scaled, passed=True,
            extras={"applicable": False, "reason": "sup A <= 0"},
        )
    else:
        const = scaled[-1][1]
        stable = h_stable(scaled, thresholds.h_stability)
        lower = EstimateReport(
            name="det_lower", measured_constant=const, region=region,
            h_refinement_trend=scaled,
            passed=bool(const > thresholds.det_lower_floor and stable),
            extras={"applicable": True, "sup_A": sup_a, "h_stable": stable},
        )

    slope_trend = []
    facets = []
    for h, pot in pots:
        poly = pot.polytope
        rows = []
        for k in range(poly.n_facets):
            pts, deltas = _facet_probes(poly, k, h)
            det = det_field(pot.hessian_at(pts))
            slope, intercept = np.polyfit(np.log(deltas), np.log(det), 1)
            rows.append({
                "facet": k,
                "slope": float(slope),
                "b": float((det * deltas).min()),
                "probe": [[float(dl), float(dt), float(np.exp(intercept) * dl ** slope)]
                          for dl, dt in zip(deltas, det)],
            })
        slope_trend.append((h, max(r["slope"] for r in rows)))
        facets = rows
    worst = slope_trend[-1][1]
    stable = h_stable(slope_trend, thresholds.h_stability)
    edge = EstimateReport(
        name="det_edge_slope", measured_constant=worst, region="facet collars, delta_k in [2h, 0.1]",
        h_refinement_trend=slope_trend,
        passed=bool(all(r["slope"] < thresholds.edge_slope_ceiling for r in facets) and stable),
        extras={"facets": facets, "h_stable": stable},
    )
    logger.debug("det_lower: %s, worst edge slope %.4f", lower.measured_constant, worst)
    return lower, edge


# ── Upper bound through the Legendre dual ────────────────────────────────

def _upper_quantities(u: SPotential, cfg: EstimateConfig, legendre: LegendreConfig,
                      dual: Optional[DualGridFn]) -> dict:
    if dual is None:
        dual = legendre_transform(u, region_margin=legendre.region_margin, inflate=legendre.inflate,
                                  dual_h=legendre.dual_h, dual_box=legendre.dual_box)
    grid = dual.grid
    nodes = np.flatnonzero(grid.interior & np.isfinite(dual.values))
    if nodes.size == 0:
        raise DualUnavailable("no Interior dual node carries a value", module="estimates")
    x = grid.points[nodes]
    xi = dual.gradient_map[nodes]
    f_tilde = dual.values[nodes] - x @ u.p_o
    det = det_field(u.hessian_at(xi))
    d = cfg.d
    ok = (d + f_tilde > 0) & (det > 0)
    if not ok.all():
        logger.warning("Dropping %d dual nodes with d + f <= 0 or det <= 0", int((~ok).sum()))
    x, f_tilde, det = x[ok], f_tilde[ok], det[ok]

    c3 = cfg.C3
    if c3 is None:
        spread = np.ptp(f_tilde) > 1e-12
        c3 = float(np.clip(np.polyfit(f_tilde, np.log(det), 1)[0], 0.0, 10.0)) if spread else 0.0
    n = u.dim
    weighted = np.exp(-c3 * f_tilde) * det / (d + f_tilde) ** (2 * n)
    hypothesis = (1.0 + (x ** 2).sum(axis=1)) / (d + f_tilde) ** 2
    return {"constant": float(weighted.max()), "b": float(hypothesis.max()), "C3": c3}


def det_upper_report(
    u: PotentialSource,
    dp: DensityPair,
    cfg: EstimateConfig = EstimateConfig(),
    thresholds: Thresholds = Thresholds(),
    legendre: LegendreConfig = LegendreConfig(),
    dual: Optional[DualGridFn] = None,
) -> EstimateReport:
    """sup exp(−C₃f̃)·det(u_ij)/(d + f̃)^{2n} over the dual sample, f̃ = f − ⟨x, p_o⟩."""
    pots = levels(u, cfg.refinements)
    trend = []
    quantities = {}
    for h, pot in pots:
        quantities = _upper_quantities(pot, cfg, legendre, dual if pot is u else None)
        trend.append((h, quantities["constant"]))

    fine = normalize_at(pots[-1][1], pots[-1][1].p_o)
    boundary_min = float(boundary_trace(fine, fine.grid.boundary_rule.points).min())
    level = cfg.section_level * boundary_min
    outer = section(fine, fine.p_o, level)
    inner = section(fine, fine.p_o, level / 2)
    grad_sq = (fine.gradient()[outer.mask] ** 2).sum(axis=1)
    inner_nodes = inner.mask & fine.grid.interior
    inner_det = fine.hessian_field().det[inner_nodes]

    stable = h_stable(trend, thresholds.h_stability)
    const = trend[-1][1]
    ceiling_ok = thresholds.upper_ceiling is None or const <= thresholds.upper_ceiling
    return EstimateReport(
        name="det_upper", measured_constant=const, region="dual sample of the Interior normal map",
        h_refinement_trend=trend,
        passed=bool(np.isfinite(const) and stable and ceiling_ok),
        extras={
            "d": cfg.d,
            "C3": quantities["C3"],
            "hypothesis_b": quantities["b"],
            "section_level": level,
            "boundary_min": boundary_min,
            "section_compact": outer.is_compact,
            "section_gradient_sup": float(grad_sq.max()) if grad_sq.size else None,
            "half_section_det_max": float(inner_det.max()) if inner_det.size else None,
            "h_stable": stable,
        },
    )


# ── Barriers ─────────────────────────────────────────────────────────────

def fd_oracle_hessian(fn: Callable[[np.ndarray], np.ndarray], points: np.ndarray, step: float) -> np.ndarray:
    """Centred Hessian at spacing step and 2·step, combined by one Richardson step."""

    def centred(s):
        m, n = points.shape
        out = np.empty((m, n, n))
        eye = np.eye(n) * s
        f0 = fn(points)
        for i in range(n):
            out[:, i, i] = (fn(points + eye[i]) - 2 * f0 + fn(points - eye[i])) / s ** 2
            for j in range(i + 1, n):
                pp = fn(points + eye[i] + eye[j])
                pm = fn(points + eye[i] - eye[j])
                mp = fn(points - eye[i] + eye[j])
                mm = fn(points - eye[i] - eye[j])
                out[:, i, j] = out[:, j, i] = (pp - pm - mp + mm) / (4 * s ** 2)
        return out

    return (4 * centred(step) - centred(2 * step)) / 3


def barrier_hessian_check(
    spec: BarrierSpec,
    sample_count: int,
    seed: int,
    thresholds: Thresholds = Thresholds(),
    step: float = 1e-3,
) -> EstimateReport:
    """Closed-form barrier Hessians against a finite-difference oracle.

    The measured constant is C₁ = min det(v_ij)/ξ₁^{nα−2} over the sample;
    the entry discrepancy, the determinant discrepancy and the A − B lower
    bound (edge barrier) are recorded alongside.
    """
    rng = stream(seed, "barrier")
    pts = sample_admissible(spec, sample_count, rng)
    closed = barrier_eval(spec, pts)
    value = lambda p: barrier_eval(spec, p).value  # noqa: E731

    exponent = spec.dim * spec.alpha - 2
    trend = []
    discrepancy = det_discrepancy = float("nan")
    for s in (2 * step, step):
        oracle = fd_oracle_hessian(value, pts, s)
        scale = np.abs(closed.hessian).max(axis=(1, 2))
        disc = np.abs(oracle - closed.hessian).max(axis=(1, 2)) / scale
        fd_det = det_field(oracle)
        trend.append((s, float((fd_det / pts[:, 0] ** exponent).min())))
        discrepancy = float(disc.max())
        det_discrepancy = float((np.abs(fd_det - closed.det) / np.abs(closed.det)).max())

    c1 = float((closed.det / pts[:, 0] ** exponent).min())
    extras = {
        "kind": spec.kind.value,
        "alpha": spec.alpha,
        "beta": spec.beta,
        "C": spec.C,
        "samples": sample_count,
        "max_relative_discrepancy": discrepancy,
        "det_discrepancy": det_discrepancy,
        "oracle_step": step,
    }
    passed = discrepancy <= thresholds.barrier_rel_tol and c1 > 0
    if spec.kind == BarrierKind.edge:
        bound = edge_gap_bound(spec, pts)
        holds = closed.det_gap >= bound
        axis_pts = sample_admissible(spec, min(sample_count, 32), rng, on_axis=True)
        extras["gap_bound_holds"] = bool(holds.all())
        extras["gap_bound_ratio_min"] = float((closed.det_gap / bound).min())
        extras["axis_cross_max"] = float(np.abs(barrier_eval(spec, axis_pts).cross).max())
        passed = passed and bool(holds.all())
    else:
        extras["a"] = spec.a
    stable = h_stable(trend, thresholds.h_stability)
    extras["h_stable"] = stable
    logger.info("Barrier %s: C1 = %.4g, discrepancy %.2e", spec.kind.value, c1, discrepancy)
    return EstimateReport(
        name="barrier_hessian", measured_constant=c1, region="admissible slab",
        h_refinement_trend=trend, passed=bool(passed and stable), extras=extras,
    )


# ── Guillemin distance bound ─────────────────────────────────────────────

def guillemin_distance_bound(
    polytope: Polytope,
    cfg: EstimateConfig = EstimateConfig(),
    thresholds: Thresholds = Thresholds(),
) -> EstimateReport:
    """sup det(v_ij)·d_E(ξ, ∂Δ)ⁿ over grid nodes, at each refinement."""
    gate = None
    trend = []
    for h in sorted(cfg.distance_refinements, reverse=True):
        grid = Grid.build(polytope, h)
        pts = grid.points[grid.active]
        if polytope.is_box and gate is None:
            gate = float(np.abs(guillemin_det_product(polytope, pts) - 1.0).max())
        det = guillemin_eval(polytope, pts).det
        dist = polytope.euclidean_boundary_distance(pts)
        trend.append((h, float((det * dist ** polytope.dim).max())))

    const = trend[-1][1]
    gate_ok = gate is None or gate <= 1e-10
    stable = h_stable(trend, thresholds.h_stability)
    ceiling_ok = thresholds.distance_ceiling is None or const <= thresholds.distance_ceiling
    return EstimateReport(
        name="guillemin_distance", measured_constant=const, region="active grid nodes",
        h_refinement_trend=trend,
        passed=bool(gate_ok and stable and ceiling_ok),
        extras={"box_identity_gap": gate, "h_stable": stable},
    )
