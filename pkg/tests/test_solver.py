import numpy as np
import pytest

from abreu_lab.errors import RefusedAffineDefect
from abreu_lab.functionals import affine_defect, check_affine_defect, defect_tolerance
from abreu_lab.grid import Grid
from abreu_lab.models import ContinuationSpec, FamilyConfig, ResidualForm, SolveConfig
from abreu_lab.operator import CombinedField, DensityPair, PolynomialField, abreu_residual, field_from_spec
from abreu_lab.polytope import Polytope
from abreu_lab.potentials import guillemin_eval
from abreu_lab.solver import (
    MabuchiProblem, balance, continuation, continuation_sequence, default_perturbation, flux_divergence, solve,
)

from tests.conftest import SQUARE_ROWS, density

LOG2 = np.log(2.0)
TRIANGLE_ROWS = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, -1.0, -1.0]]

# D = 1 + ξ with A = (6 + 36ξ)/13: L_A vanishes on 1 and ξ over [0, 1]
BALANCED = DensityPair(
    D=PolynomialField(constant=1.0, terms=((1.0, (1,)),)),
    A=PolynomialField(constant=6 / 13, terms=((36 / 13, (1,)),)),
)


def _gap_to_guillemin(u, margin: float) -> float:
    grid = u.grid
    mask = grid.mask(margin)
    v = guillemin_eval(u.polytope, grid.points[mask]).value
    return float(np.abs(u.values()[mask] - (v + LOG2 * u.dim)).max())


# ── Discrete functional ──────────────────────────────────────────────────

def test_problem_gradient_matches_differences(interval, cp1, rng):
    problem = MabuchiProblem(Grid.build(interval, 1 / 16), cp1, [0.5])
    y = 1e-3 * rng.normal(size=problem.size)
    d = rng.normal(size=problem.size)
    eps = 1e-6
    fd = (problem.value(y + eps * d) - problem.value(y - eps * d)) / (2 * eps)
    assert float(problem.gradient(y) @ d) == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_projection_enforces_gauge(square, cp1xcp1, rng):
    problem = MabuchiProblem(Grid.build(square, 1 / 16), cp1xcp1, [0.5, 0.5])
    y = problem.project(rng.normal(size=problem.size))
    np.testing.assert_allclose(problem.C @ y, 0.0, atol=1e-10)


def test_non_convex_start_is_infinite(interval, cp1):
    problem = MabuchiProblem(Grid.build(interval, 1 / 16), cp1, [0.5])
    grid = problem.grid
    phi = np.where(grid.active, -10.0 * (grid.points[:, 0] - 0.5) ** 2, np.nan)
    assert problem.value(problem.restrict(phi)) == np.inf


def test_flux_divergence_of_simplex_potential():
    tri = Polytope.from_rows(TRIANGLE_ROWS)
    pts = np.array([[0.2, 0.3], [1e-3, 0.5], [0.49, 0.5]])
    np.testing.assert_allclose(flux_divergence(tri, PolynomialField(constant=1.0), pts, 1 / 32), -6.0, rtol=1e-8)


def test_linear_term_vanishes_on_affines(interval):
    problem = MabuchiProblem(Grid.build(interval, 1 / 64), BALANCED, [0.5])
    scale = float(np.abs(problem.ell).max())
    np.testing.assert_allclose(problem.ell @ problem.Q, 0.0, atol=1e-12 * scale * problem.size)
    g = problem.gradient(np.zeros(problem.size))
    np.testing.assert_allclose(problem.project_t(g), g, atol=1e-10 * float(np.abs(g).max()))


@pytest.mark.parametrize("rows,a,p_o", [
    (SQUARE_ROWS, 4.0, [0.5, 0.5]),
    (TRIANGLE_ROWS, 6.0, [0.25, 0.25]),
])
def test_guillemin_is_a_discrete_critical_point(rows, a, p_o):
    problem = MabuchiProblem(Grid.build(Polytope.from_rows(rows), 1 / 32), density(1.0, a), p_o)
    g = problem.project_t(problem.gradient(np.zeros(problem.size)))
    assert float(np.abs(g).max()) / problem.min_vol <= 1e-8


# ── Solve ────────────────────────────────────────────────────────────────

def test_coarse_interval_solve(interval, cp1):
    u, report = solve(interval, cp1, SolveConfig(h=1 / 32), p_o=[0.5])
    history = report.mabuchi_history
    assert all(b <= a for a, b in zip(history, history[1:]))
    assert not report.stalled
    assert u.evaluate([0.5])[0] == pytest.approx(0.0, abs=1e-10)
    assert _gap_to_guillemin(u, 0.1) <= 5e-2


def test_square_solve_stays_at_guillemin(square, cp1xcp1):
    u, report = solve(square, cp1xcp1, SolveConfig(h=1 / 32), p_o=[0.5, 0.5])
    assert report.iterations == 0
    assert not report.stalled
    assert report.gradient_norm <= 1e-6
    assert _gap_to_guillemin(u, 0.1) <= 1e-6


def test_balanced_non_constant_data_converges(interval):
    u, report = solve(interval, BALANCED, SolveConfig(h=1 / 512), p_o=[0.5], defect_rel_tol=1e-4)
    assert report.converged
    assert report.residuals[ResidualForm.primal.value] <= report.residual_tol
    r = abreu_residual(u, BALANCED, ResidualForm.primal)
    near_p_o = np.abs(u.grid.points[:, 0] - 0.5) <= 0.05
    assert np.nanmax(np.abs(r.values[near_p_o])) <= report.residual_tol


def test_defect_tolerance_is_overridable(interval):
    grid = Grid.build(interval, 1 / 64)
    with pytest.raises(RefusedAffineDefect):
        check_affine_defect(grid, BALANCED)
    defect = check_affine_defect(grid, BALANCED, rel_tol=1e-3)
    assert defect.max() <= defect_tolerance(grid, BALANCED, 1e-3)
    assert defect_tolerance(grid, BALANCED, 1e-3) == pytest.approx(1e3 * defect_tolerance(grid, BALANCED), rel=1e-12)


def test_refuses_unbalanced_data(square):
    with pytest.raises(RefusedAffineDefect, match=r"L_A\(1\)"):
        solve(square, density(1.0, 0.0), SolveConfig(h=1 / 32))


def test_solve_attaches_stability_audit(interval, cp1):
    _, report = solve(interval, cp1, SolveConfig(h=1 / 32), p_o=[0.5],
                      family=FamilyConfig(max_kinks=1, samples=50), seed=3)
    assert report.lambda_hat > 0
    assert report.lambda_consistent


@pytest.mark.slow
def test_cp1_recovers_guillemin(interval, cp1):
    u, report = solve(interval, cp1, SolveConfig(h=1 / 256), p_o=[0.5])
    assert report.converged
    assert _gap_to_guillemin(u, 0.05) <= 1e-2
    assert report.residuals[ResidualForm.primal.value] <= 1e-3
    assert report.identity_gap <= 1e-3 * abs(report.identity_target)


@pytest.mark.slow
def test_cp1xcp1_recovers_guillemin(square, cp1xcp1):
    u, report = solve(square, cp1xcp1, SolveConfig(h=1 / 64), p_o=[0.5, 0.5])
    assert report.converged
    assert not report.stalled
    assert _gap_to_guillemin(u, 0.1) <= 5e-2


# ── Continuation ─────────────────────────────────────────────────────────

def test_default_perturbation_values():
    field = field_from_spec(default_perturbation(1), 1)
    np.testing.assert_allclose(field(np.array([[0.0], [0.5], [1.0]])), [1.0, -0.5, 1.0])


def test_balance_removes_affine_defect(square, cp1xcp1):
    grid = Grid.build(square, 1 / 32)
    pert = field_from_spec(default_perturbation(2), 2)
    balanced = balance(pert, cp1xcp1.D, grid)
    dp = DensityPair(D=cp1xcp1.D, A=CombinedField(((1.0, cp1xcp1.A), (1.0, balanced))))
    assert affine_defect(grid, dp).max() <= defect_tolerance(grid, dp)


def test_balance_leaves_balanced_field_alone(interval):
    grid = Grid.build(interval, 1 / 32)
    d = PolynomialField(constant=1.0)
    pert = field_from_spec(default_perturbation(1), 1)
    once = balance(pert, d, grid)
    pts = grid.points[grid.active]
    np.testing.assert_allclose(balance(once, d, grid)(pts), once(pts), atol=1e-12)


def test_continuation_sequence_converges_to_limit(interval, cp1):
    seq = continuation_sequence(ContinuationSpec(k_max=4), cp1.D, cp1.A, 1)
    pts = np.array([[0.0], [0.5]])
    assert len(seq) == 4
    np.testing.assert_allclose(seq[3].A(pts), 2.0 + np.array([1.0, -0.5]) / 4)


def test_continuation_sequence_explicit(cp1):
    spec = ContinuationSpec(sequence=[{"constant": 2.0}, {"constant": 3.0}])
    seq = continuation_sequence(spec, cp1.D, cp1.A, 1)
    np.testing.assert_allclose([dp.A(np.array([[0.2]]))[0] for dp in seq], [2.0, 3.0])


@pytest.mark.slow
def test_continuation_gaps_shrink(interval, cp1):
    cfg = SolveConfig(h=1 / 64)
    grid = Grid.build(interval, cfg.h)
    seq = continuation_sequence(ContinuationSpec(k_max=4), cp1.D, cp1.A, 1, grid=grid)
    result = continuation(interval, seq, cfg, p_o=[0.5], family=FamilyConfig(max_kinks=1, samples=50))
    assert [s.status for s in result.steps] == ["ok"] * 4
    gaps = [s.sup_gap for s in result.steps[1:]]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert all(s.lambda_hat is not None for s in result.steps)
