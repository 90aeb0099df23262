"""Enums, run configuration schemas and report schemas."""

import enum
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class NodeKind(enum.IntEnum):
    outside = 0
    band = 1
    interior = 2


class Containment(str, enum.Enum):
    interior = "Interior"
    boundary = "Boundary"
    outside = "Outside"


class ResidualForm(str, enum.Enum):
    primal = "Primal"
    cofactor = "Cofactor"
    dual = "Dual"


class BarrierKind(str, enum.Enum):
    edge = "EdgeBarrier"
    linear_cap = "LinearCapBarrier"


# ── Config schemas ───────────────────────────────────────────────────────

class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PolytopeSpec(Strict):
    rows: list[list[float]]
    vertices: Optional[list[list[float]]] = None
    sigma_scale: Optional[list[float]] = None

    @field_validator("rows")
    @classmethod
    def rows_rectangular(cls, rows):
        if not rows:
            raise ValueError("at least one facet row is required")
        width = len(rows[0])
        if width < 2 or any(len(r) != width for r in rows):
            raise ValueError("facet rows must share a length of n + 1 >= 2")
        return rows


class Monomial(Strict):
    coef: float
    powers: list[int]


class FieldSpec(Strict):
    """constant + Σ coef·Π ξ_i^p, or a GridFn dump on disk."""

    constant: float = 0.0
    terms: list[Monomial] = []
    grid_file: Optional[str] = None


class SolveConfig(Strict):
    h: float = Field(1 / 64, gt=0)
    margin: Optional[float] = Field(None, gt=0)
    max_iterations: int = Field(60, gt=0)
    initial_damping: float = Field(1.0, gt=0, le=1)
    backtracking: float = Field(0.5, gt=0, lt=1)
    min_step: float = Field(1e-10, gt=0)
    armijo: float = Field(1e-4, gt=0, lt=0.5)
    gradient_norm_tol: float = Field(1e-6, gt=0)
    residual_tol: Optional[float] = Field(None, gt=0)
    det_floor: float = Field(1e-12, gt=0)
    cg_rtol: float = Field(1e-8, gt=0)
    cg_maxiter: Optional[int] = Field(None, gt=0)
    psd_probe_every: int = Field(0, ge=0)
    dual_residual: bool = False


class FamilyConfig(Strict):
    max_kinks: int = Field(2, ge=1)
    samples: int = Field(500, ge=1)
    allow_affine_defect: bool = False


class ContinuationSpec(Strict):
    """A^(k) = A_limit + perturbation/k, or an explicit sequence."""

    perturbation: Optional[FieldSpec] = None
    k_max: int = Field(8, ge=1)
    sequence: Optional[list[FieldSpec]] = None
    omega_margin: float = Field(0.1, gt=0)


class BarrierConfig(Strict):
    kind: BarrierKind = BarrierKind.edge
    dim: int = Field(2, ge=2)
    alpha: float = 0.5
    beta: float = 0.5
    C: Optional[float] = Field(None, gt=0)
    a: Optional[float] = Field(None, gt=0)
    samples: int = Field(200, ge=1)


class LegendreConfig(Strict):
    dual_h: Optional[float] = Field(None, gt=0)
    dual_box: Optional[list[list[float]]] = None
    inflate: float = Field(0.1, ge=0)
    region_margin: float = Field(0.1, ge=0)


class EstimateConfig(Strict):
    margin: float = Field(0.05, gt=0)
    d: float = Field(1.0, gt=0)
    C3: Optional[float] = Field(None, ge=0)
    section_level: float = Field(0.5, gt=0, lt=1)  # fraction of the normalized boundary minimum
    refinements: list[float] = [1 / 16, 1 / 32]
    distance_refinements: list[float] = [1 / 32, 1 / 64, 1 / 128]


class Thresholds(Strict):
    h_stability: float = Field(0.1, gt=0)
    det_lower_floor: float = 0.0
    edge_slope_ceiling: float = 0.0
    upper_ceiling: Optional[float] = None
    distance_ceiling: Optional[float] = None
    barrier_rel_tol: float = Field(1e-4, gt=0)
    identity_rel_tol: float = Field(1e-3, gt=0)
    defect_rel_tol: Optional[float] = Field(None, gt=0)


class RunConfig(Strict):
    schema_version: Literal[1] = 1
    polytope: PolytopeSpec
    D: FieldSpec = FieldSpec(constant=1.0)
    A: FieldSpec = FieldSpec(constant=0.0)
    p_o: Optional[list[float]] = None
    seed: int = Field(0, ge=0)
    solver: SolveConfig = SolveConfig()
    family: FamilyConfig = FamilyConfig()
    continuation: Optional[ContinuationSpec] = None
    barrier: BarrierConfig = BarrierConfig()
    legendre: LegendreConfig = LegendreConfig()
    estimates: EstimateConfig = EstimateConfig()
    thresholds: Thresholds = Thresholds()
    potential: Optional[str] = None
    output_dir: str = "out"

    @model_validator(mode="after")
    def p_o_matches_dimension(self):
        n = len(self.polytope.rows[0]) - 1
        if self.p_o is not None and len(self.p_o) != n:
            raise ValueError(f"p_o must have {n} coordinates")
        return self


# ── Reports ──────────────────────────────────────────────────────────────

class Kink(BaseModel):
    """max(0, ⟨normal, ξ⟩ − offset)"""

    normal: list[float]
    offset: float


class Witness(BaseModel):
    tier: int
    member: int
    kinks: list[Kink]
    ratio: float


class StabilityReport(BaseModel):
    label: str = "family infimum"
    lambda_hat: float
    witness: Witness
    affine_defect: list[float]
    samples: int
    members_evaluated: int
    seed: int
    p_o: list[float]


class EstimateReport(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    name: str
    measured_constant: Optional[float]
    region: str
    h_refinement_trend: list[tuple[float, float]]
    passed: bool = Field(alias="pass")
    extras: dict[str, Any] = {}

    @field_validator("h_refinement_trend")
    @classmethod
    def trend_nonempty(cls, trend):
        if not trend:
            raise ValueError("refinement trend must not be empty")
        return trend


class SolveReport(BaseModel):
    converged: bool
    stalled: bool = False
    iterations: int
    h: float
    mabuchi: float
    mabuchi_history: list[float]
    gradient_norm: float
    residuals: dict[str, Optional[float]]
    residual_tol: float
    l_functional: float
    identity_target: float
    identity_gap: float
    det_min: float
    det_max: float
    psd_min_eigenvalue: Optional[float] = None
    lambda_hat: Optional[float] = None
    lambda_consistent: Optional[bool] = None
    estimates: list[EstimateReport] = []
    p_o: list[float]


class ContinuationStep(BaseModel):
    k: int
    status: Literal["ok", "failed"]
    error: Optional[str] = None
    report: Optional[SolveReport] = None
    sup_gap: Optional[float] = None
    third_derivative_gap: Optional[float] = None
    boundary_mass: Optional[float] = None
    boundary_mass_bound: Optional[float] = None
    lambda_hat: Optional[float] = None
    lambda_consistent: Optional[bool] = None
