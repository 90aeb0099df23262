"""Damped Newton minimisation of the discrete Mabuchi functional, and continuation.

The unknowns are φ at the nodes read by some Interior Hessian stencil; any
other active node takes φ by affine-exact extrapolation from them. Gauge
freedom (adding affine functions) is removed by holding φ(p_o) and ∇φ(p_o)
fixed along every Newton direction.

The linear term is the weak form of L_A about v: the discrete flux of v
tested against the Hessian stencils, minus the Abreu source of v at every
active node. Its affine moments are removed, so it vanishes on affine φ and
the exact Guillemin potential of balanced data is a discrete critical point.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, cg, eigsh

from abreu_lab.errors import AbreuLabError, DegenerateHessian, LineSearchStalled
from abreu_lab.functionals import (
    boundary_mass_bound, check_affine_defect, identity_target, l_functional, mabuchi, stability_lambda,
)
from abreu_lab.grid import Grid, GridFn, adjugate, det_field, fd_third, log_collar_correction
from abreu_lab.models import (
    ContinuationSpec, ContinuationStep, FamilyConfig, FieldSpec, ResidualForm, SolveConfig, SolveReport,
)
from abreu_lab.operator import (
    CombinedField, DensityPair, Field, PolynomialField, default_margin, field_from_spec, residual_norms,
)
from abreu_lab.polytope import Polytope
from abreu_lab.potentials import SPotential, guillemin_eval, guillemin_trace, normalize_at

logger = logging.getLogger(__name__)


# ── Linear term ──────────────────────────────────────────────────────────

def flux_divergence(polytope: Polytope, D: Field, points: np.ndarray, h: float) -> np.ndarray:
    """Σ_ij ∂_i∂_j(D·v^{ij}) at interior points, v the Guillemin potential.

    Centred differences at a per-point step of a quarter of min(h, distance
    to ∂Δ), so every sample stays strictly inside.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    step = 0.25 * np.minimum(h, polytope.euclidean_boundary_distance(points))[:, None]

    def tensor(p):
        hess = guillemin_eval(polytope, p).hessian
        return D(p)[:, None, None] * adjugate(hess) / det_field(hess)[:, None, None]

    n = polytope.dim
    eye = np.eye(n)
    s2 = step[:, 0] ** 2
    centre = tensor(points)
    out = np.zeros(len(points))
    for i in range(n):
        ei = step * eye[i]
        out += (tensor(points + ei)[:, i, i] - 2 * centre[:, i, i] + tensor(points - ei)[:, i, i]) / s2
        for j in range(i + 1, n):
            ej = step * eye[j]
            mixed = (tensor(points + ei + ej) - tensor(points + ei - ej)
                     - tensor(points - ei + ej) + tensor(points - ei - ej))[:, i, j]
            out += 2 * mixed / (4 * s2)
    return out


def affine_moments(grid: Grid, d: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Coefficients c of ℓ = c_0 + Σ c_i ξ_i with Σ vol·(values − d·ℓ)·{1, ξ} = 0 over active nodes."""
    act = grid.active
    pts = grid.points[act]
    basis = np.hstack([np.ones((len(pts), 1)), pts])
    vol = grid.volumes[act]
    moments = basis.T @ ((vol * d)[:, None] * basis)
    return np.linalg.solve(moments, basis.T @ (vol * values))


# ── Discrete problem ─────────────────────────────────────────────────────

class MabuchiProblem:
    """𝓕_A as a function of the reduced unknown vector y, with φ = E·y."""

    def __init__(self, grid: Grid, dp: DensityPair, p_o, det_floor: float = 1e-12):
        self.grid = grid
        self.dp = dp
        self.p_o = np.asarray(p_o, dtype=float)
        self.det_floor = det_floor
        n = grid.dim
        interior = np.flatnonzero(grid.interior)
        self.interior = interior
        restrict = sparse.csr_matrix(
            (np.ones(interior.size), (np.arange(interior.size), interior)), shape=(interior.size, grid.size),
        )

        # support of the Interior Hessian stencils
        touched = np.zeros(grid.size, dtype=bool)
        for (i, j), (op, _) in grid.second.items():
            if i <= j:
                touched |= np.asarray(abs(restrict @ op).sum(axis=0)).ravel() > 0
        self.support = np.flatnonzero(touched & grid.active)
        self.E = self._extension(touched & grid.active)

        self.pairs = [(i, j) for i in range(n) for j in range(i, n)]
        self.weights = {(i, j): 1.0 if i == j else 2.0 for i, j in self.pairs}
        self.M = {(i, j): (restrict @ grid.second[(i, j)][0] @ self.E).tocsr() for i, j in self.pairs}

        d, a = dp.nodes(grid)
        vol = grid.volumes
        self.w = vol[interior] * d[interior]
        self.min_vol = float(vol[interior].min())

        # analytic v at the nodes
        v = SPotential.initial(grid, self.p_o).v_nodes
        self.hv = v.hessian[interior]

        # linear term: discrete flux of v plus the residual source of v,
        # with the source's affine moments removed
        act = grid.active
        pts = grid.points[act]
        source = np.zeros(grid.size)
        source[act] = flux_divergence(grid.polytope, dp.D, pts, float(grid.h.min())) + a[act] * d[act]
        self.affine_correction = affine_moments(grid, d[act], source[act])
        source[act] -= d[act] * (self.affine_correction[0] + pts @ self.affine_correction[1:])
        logger.debug("Affine correction of the linear term: %s", self.affine_correction)
        inv_v = adjugate(self.hv) / det_field(self.hv)[:, None, None]
        self.ell = self._scatter(inv_v) - self.E.T @ np.nan_to_num(vol * source)

        rule = grid.boundary_rule
        sigma_d = rule.weights * dp.check(rule.points)
        band = grid.band
        const = -float(np.dot(vol[band], np.log(v.det[band]) * d[band]))
        const += log_collar_correction(grid, weight=d)
        const += float(np.dot(rule.weights, guillemin_trace(grid.polytope, rule.points) * sigma_d))
        const -= float(np.dot(vol[grid.active], (a * d * v.value)[grid.active]))
        self.const = const

        # gauge: value and gradient of φ at p_o
        at_po = grid.interpolation_matrix(self.p_o[None, :])
        rows = [at_po @ self.E] + [at_po @ op @ self.E for op, _ in grid.first]
        self.C = sparse.vstack(rows).tocsr()
        pts = grid.points[self.support] - self.p_o
        self.Q = np.hstack([np.ones((self.support.size, 1)), pts])
        self.CQ_inv = np.linalg.inv(self.C @ self.Q)

    def _extension(self, support: np.ndarray) -> sparse.csr_matrix:
        grid = self.grid
        cols = np.flatnonzero(support)
        index = np.full(grid.size, -1)
        index[cols] = np.arange(cols.size)
        ident = sparse.csr_matrix((np.ones(cols.size), (cols, np.arange(cols.size))), shape=(grid.size, cols.size))
        rest = np.flatnonzero(grid.active & ~support)
        if rest.size == 0:
            return ident
        interp = grid.interpolation_matrix(grid.points[rest], usable=support).tocoo()
        extra = sparse.csr_matrix(
            (interp.data, (rest[interp.row], index[interp.col])), shape=(grid.size, cols.size),
        )
        return (ident + extra).tocsr()

    @property
    def size(self) -> int:
        return self.support.size

    # ── Field evaluation ─────────────────────────────────────────────────

    def phi(self, y: np.ndarray) -> np.ndarray:
        return np.where(self.grid.active, self.E @ y, np.nan)

    def restrict(self, phi: np.ndarray) -> np.ndarray:
        return np.nan_to_num(phi)[self.support]

    def _assemble(self, y: np.ndarray, base: Optional[np.ndarray]) -> np.ndarray:
        n = self.grid.dim
        out = np.zeros((self.interior.size, n, n)) if base is None else base.copy()
        for i, j in self.pairs:
            entry = self.M[(i, j)] @ y
            out[:, i, j] += entry
            if i != j:
                out[:, j, i] += entry
        return out

    def hessian(self, y: np.ndarray) -> np.ndarray:
        return self._assemble(y, self.hv)

    def value(self, y: np.ndarray) -> float:
        det = det_field(self.hessian(y))
        if not np.all(det > self.det_floor):
            return np.inf
        return float(-np.dot(self.w, np.log(det)) + self.ell @ y + self.const)

    def _inverse(self, y: np.ndarray) -> np.ndarray:
        hess = self.hessian(y)
        det = det_field(hess)
        bad = np.flatnonzero(~(det > self.det_floor))
        if bad.size:
            raise DegenerateHessian(f"det(u_ij) <= {self.det_floor:g}", context=self.interior[bad].tolist())
        return adjugate(hess) / det[:, None, None]

    def _scatter(self, field: np.ndarray) -> np.ndarray:
        out = np.zeros(self.size)
        for i, j in self.pairs:
            out += self.weights[(i, j)] * (self.M[(i, j)].T @ (self.w * field[:, i, j]))
        return out

    def gradient(self, y: np.ndarray) -> np.ndarray:
        return -self._scatter(self._inverse(y)) + self.ell

    def hessian_operator(self, y: np.ndarray) -> tuple[LinearOperator, LinearOperator]:
        """Projected Hessian Πᵀ H Π and a Jacobi preconditioner."""
        inv = self._inverse(y)

        def hvp(d):
            dh = self._assemble(np.asarray(d).ravel(), None)
            return self._scatter(np.einsum("mij,mjk,mkl->mil", inv, dh, inv))

        n = self.grid.dim
        diag = np.zeros(self.size)
        for i in range(n):
            for j in range(n):
                mij = self.M[(min(i, j), max(i, j))]
                for k in range(n):
                    for l in range(n):
                        mkl = self.M[(min(k, l), max(k, l))]
                        diag += mij.multiply(mkl).T @ (self.w * inv[:, l, i] * inv[:, j, k])
        floor = 1e-12 * max(float(diag.max()), 1e-300)
        precond = 1.0 / np.maximum(diag, floor)

        op = LinearOperator(
            (self.size, self.size),
            matvec=lambda z: self.project_t(hvp(self.project(np.asarray(z).ravel()))),
            dtype=float,
        )
        jacobi = LinearOperator((self.size, self.size), matvec=lambda z: precond * np.asarray(z).ravel(), dtype=float)
        return op, jacobi

    def project(self, y: np.ndarray) -> np.ndarray:
        """Π = I − Q(CQ)⁻¹C; Πy satisfies the gauge."""
        return y - self.Q @ (self.CQ_inv @ (self.C @ y))

    def project_t(self, z: np.ndarray) -> np.ndarray:
        return z - self.C.T @ (self.CQ_inv.T @ (self.Q.T @ z))

    def potential(self, y: np.ndarray) -> SPotential:
        return SPotential(grid=self.grid, phi=self.phi(y), p_o=self.p_o, guillemin=True)


# ── Solve ────────────────────────────────────────────────────────────────

@dataclass
class _State:
    y: np.ndarray
    value: float
    iterations: int = 0
    gradient_norm: float = np.inf
    stationary: bool = False
    stalled: bool = False
    psd_min: Optional[float] = None


def _line_search(problem: MabuchiProblem, state: _State, g: np.ndarray, d: np.ndarray, cfg: SolveConfig) -> None:
    slope = float(g @ d)
    t = cfg.initial_damping
    while t >= cfg.min_step:
        trial = state.y + t * d
        value = problem.value(trial)
        if value <= state.value + cfg.armijo * t * slope and value < state.value:
            state.y, state.value = trial, value
            return
        t *= cfg.backtracking
    raise LineSearchStalled(f"step fell below {cfg.min_step:g}", context=f"gradient norm {state.gradient_norm:.3e}")


def _psd_probe(op: LinearOperator) -> Optional[float]:
    if op.shape[0] < 3:
        return None
    try:
        vals = eigsh(op, k=1, which="SA", tol=1e-6, maxiter=2000, return_eigenvectors=False)
    except ArpackNoConvergence:
        logger.warning("Lanczos probe did not converge")
        return None
    return float(vals[0])


def _newton(problem: MabuchiProblem, state: _State, cfg: SolveConfig, history: list[float]) -> None:
    for it in range(cfg.max_iterations):
        g = problem.gradient(state.y)
        pg = problem.project_t(g)
        state.gradient_norm = float(np.abs(pg).max()) / problem.min_vol
        if state.gradient_norm <= cfg.gradient_norm_tol:
            state.stationary = True
            return

        op, jacobi = problem.hessian_operator(state.y)
        z, info = cg(op, -pg, rtol=cfg.cg_rtol, maxiter=cfg.cg_maxiter, M=jacobi)
        if info != 0:
            logger.debug("CG returned info=%d at iteration %d", info, it)
        d = problem.project(z)
        if not float(g @ d) < 0:
            d = -problem.project(pg)
        decrement = -float(g @ d)
        if decrement <= 1e-14 * (1.0 + abs(state.value)):
            state.stationary = True
            return

        previous = state.value
        _line_search(problem, state, g, d, cfg)
        state.iterations += 1
        history.append(state.value)
        assert state.value < previous
        logger.info("iteration %d: F = %.12f, |grad| = %.3e, decrement = %.3e",
                    state.iterations, state.value, state.gradient_norm, decrement)

        if cfg.psd_probe_every and state.iterations % cfg.psd_probe_every == 0:
            probe_op, _ = problem.hessian_operator(state.y)
            state.psd_min = _psd_probe(probe_op)
            logger.debug("PSD probe: smallest eigenvalue %s", state.psd_min)


def solve(
    polytope: Polytope,
    dp: DensityPair,
    cfg: SolveConfig,
    p_o=None,
    phi0: Optional[np.ndarray] = None,
    family: Optional[FamilyConfig] = None,
    seed: int = 0,
    grid: Optional[Grid] = None,
    defect_rel_tol: Optional[float] = None,
) -> tuple[SPotential, SolveReport]:
    """Minimise the discrete 𝓕_A over φ starting from φ0 (default 0)."""
    grid = Grid.build(polytope, cfg.h) if grid is None else grid
    p_o = polytope.interior_point if p_o is None else np.asarray(p_o, dtype=float)
    check_affine_defect(grid, dp, rel_tol=defect_rel_tol)

    problem = MabuchiProblem(grid, dp, p_o, cfg.det_floor)
    y0 = np.zeros(problem.size) if phi0 is None else problem.restrict(phi0)
    value = problem.value(y0)
    if not np.isfinite(value):
        raise DegenerateHessian("initial potential is not strictly convex on Interior nodes", module="solver")
    state = _State(y=y0, value=value)
    history = [value]
    logger.info("Solving on grid %s with %d unknowns", grid.shape, problem.size)

    try:
        _newton(problem, state, cfg, history)
    except LineSearchStalled as exc:
        logger.warning("Line search stalled: %s; returning best iterate", exc)
        state.stalled = True

    u = normalize_at(problem.potential(state.y), p_o)
    report = _report(u, dp, cfg, state, history)
    if family is not None:
        audit = stability_lambda(grid, dp, family, seed, p_o, defect_rel_tol=defect_rel_tol)
        report.lambda_hat = audit.lambda_hat
        report.lambda_consistent = (not report.converged) or audit.lambda_hat > 0
    return u, report


def _report(u: SPotential, dp: DensityPair, cfg: SolveConfig, state: _State, history: list[float]) -> SolveReport:
    grid = u.grid
    margin = default_margin(grid) if cfg.margin is None else cfg.margin
    _, a = dp.nodes(grid)
    residual_tol = cfg.residual_tol
    if residual_tol is None:
        residual_tol = 1e-3 * (1.0 + float(np.nanmax(np.abs(a[grid.active]))))

    forms = [ResidualForm.primal, ResidualForm.cofactor]
    if cfg.dual_residual:
        forms.append(ResidualForm.dual)
    residuals = residual_norms(u, dp, margin, forms)

    l_value = l_functional(u, dp)
    target = identity_target(grid, dp)
    gap = abs(l_value - target)
    mask = grid.mask(margin)
    det = u.hessian_field(cfg.det_floor).det[mask]

    primal = residuals[ResidualForm.primal.value]
    converged = (
        state.stationary
        and not state.stalled
        and primal <= residual_tol
        and gap <= 1e-3 * abs(target)
    )
    if state.stationary and not converged:
        logger.warning("Stationary point fails the residual gate: residual %.3e (tol %.3e), identity gap %.3e",
                       primal, residual_tol, gap)
    return SolveReport(
        converged=converged,
        stalled=state.stalled,
        iterations=state.iterations,
        h=float(grid.h.max()),
        mabuchi=mabuchi(u, dp, cfg.det_floor),
        mabuchi_history=history,
        gradient_norm=state.gradient_norm,
        residuals=residuals,
        residual_tol=residual_tol,
        l_functional=l_value,
        identity_target=target,
        identity_gap=gap,
        det_min=float(det.min()) if det.size else float("nan"),
        det_max=float(det.max()) if det.size else float("nan"),
        psd_min_eigenvalue=state.psd_min,
        p_o=u.p_o.tolist(),
    )


# ── Continuation ─────────────────────────────────────────────────────────

def continuation_sequence(
    spec: ContinuationSpec, D: Field, A_limit: Field, dim: int, grid: Optional[Grid] = None,
) -> list[DensityPair]:
    """A^(k) = A_limit + perturbation/k for k = 1..k_max, or the explicit list.

    With a grid the perturbation is first balanced against its discrete
    affine moments, so A^(k) inherits the affine balance of A_limit.
    """
    if spec.sequence:
        return [DensityPair(D=D, A=field_from_spec(item, dim)) for item in spec.sequence]
    perturbation = spec.perturbation or default_perturbation(dim)
    pert = field_from_spec(perturbation, dim)
    if grid is not None:
        pert = balance(pert, D, grid)
    return [
        DensityPair(D=D, A=CombinedField(((1.0, A_limit), (1.0 / k, pert))))
        for k in range(1, spec.k_max + 1)
    ]


def balance(field: Field, D: Field, grid: Grid) -> Field:
    """field plus the affine function that zeroes its D-weighted moments against 1, ξ_1, …, ξ_n on the grid."""
    pts = grid.points[grid.active]
    d = D(pts)
    coef = -affine_moments(grid, d, d * field(pts))
    linear = tuple((float(c), tuple(int(i == j) for j in range(grid.dim))) for i, c in enumerate(coef[1:]))
    logger.debug("Balancing correction %s", coef)
    return CombinedField(((1.0, field), (1.0, PolynomialField(constant=float(coef[0]), terms=linear))))


def default_perturbation(dim: int) -> FieldSpec:
    """Σ_i (6ξ_i² − 6ξ_i + 1): zero mean and zero first moments on the unit cube."""
    terms = []
    for i in range(dim):
        powers = [0] * dim
        powers[i] = 2
        terms.append({"coef": 6.0, "powers": list(powers)})
        powers[i] = 1
        terms.append({"coef": -6.0, "powers": list(powers)})
    return FieldSpec(constant=float(dim), terms=terms)


@dataclass
class ContinuationResult:
    potentials: list[Optional[SPotential]]
    steps: list[ContinuationStep]


def continuation(
    polytope: Polytope,
    dp_seq: Sequence[DensityPair],
    cfg: SolveConfig,
    p_o=None,
    family: Optional[FamilyConfig] = None,
    seed: int = 0,
    omega_margin: float = 0.1,
    defect_rel_tol: Optional[float] = None,
) -> ContinuationResult:
    """Solve along the sequence, warm-starting from the last success."""
    grid = Grid.build(polytope, cfg.h)
    p_o = polytope.interior_point if p_o is None else np.asarray(p_o, dtype=float)
    omega = grid.mask(omega_margin)
    family = family or FamilyConfig()

    potentials: list[Optional[SPotential]] = []
    steps: list[ContinuationStep] = []
    previous: Optional[SPotential] = None
    for k, dp in enumerate(dp_seq, start=1):
        try:
            u, report = solve(polytope, dp, cfg, p_o=p_o,
                              phi0=None if previous is None else previous.phi, grid=grid,
                              defect_rel_tol=defect_rel_tol)
        except AbreuLabError as exc:
            logger.warning("Continuation index %d failed: %s", k, exc)
            potentials.append(None)
            steps.append(ContinuationStep(k=k, status="failed", error=str(exc)))
            previous = None
            continue

        step = ContinuationStep(k=k, status="ok", report=report)
        if previous is not None:
            step.sup_gap = float(np.abs(u.values() - previous.values())[omega].max())
            third = fd_third(GridFn(grid, u.phi - previous.phi))
            step.third_derivative_gap = float(np.nanmax(third[omega]))
        try:
            audit = stability_lambda(grid, dp, family, seed, p_o, defect_rel_tol=defect_rel_tol)
            mass = boundary_mass_bound(u, dp, audit.lambda_hat)
            step.lambda_hat = audit.lambda_hat
            step.lambda_consistent = (not report.converged) or audit.lambda_hat > 0
            step.boundary_mass = mass.lhs
            step.boundary_mass_bound = mass.rhs
        except AbreuLabError as exc:
            logger.warning("Stability audit at index %d failed: %s", k, exc)
        logger.info("Continuation index %d: converged=%s, sup gap %s", k, report.converged, step.sup_gap)
        potentials.append(u)
        steps.append(step)
        previous = u
    return ContinuationResult(potentials=potentials, steps=steps)
