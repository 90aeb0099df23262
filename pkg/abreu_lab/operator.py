"""Density pairs, 𝔽 = 𝔻/det(u_ij), cofactors and the Abreu residual."""

import itertools
import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy import ndimage

from abreu_lab.config import get_settings
from abreu_lab.errors import ConfigInvalid, DualUnavailable, NonPositiveDensity
from abreu_lab.grid import Grid, GridFn, adjugate, fd_gradient, fd_hessian, fd_hessian_det
from abreu_lab.models import FieldSpec, ResidualForm
from abreu_lab.potentials import SPotential

logger = logging.getLogger(__name__)
settings = get_settings()

# layers of Interior dual nodes lost to the two nested second-difference stencils
DUAL_REACH = 2


# ── Fields on Δ̄ ──────────────────────────────────────────────────────────

class Field(Protocol):
    def __call__(self, points: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class PolynomialField:
    """constant + Σ coef·Π ξ_i^p"""

    constant: float = 0.0
    terms: tuple[tuple[float, tuple[int, ...]], ...] = ()

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        out = np.full(len(pts), self.constant, dtype=float)
        for coef, powers in self.terms:
            out += coef * np.prod(pts ** np.asarray(powers), axis=1)
        return out


@dataclass(frozen=True)
class SampledField:
    """Node field read back from a dump, interpolated affine-exactly."""

    values: GridFn

    def __call__(self, points: np.ndarray) -> np.ndarray:
        grid = self.values.grid
        usable = grid.active & np.isfinite(self.values.values)
        interp = grid.interpolation_matrix(np.atleast_2d(points), usable)
        return interp @ np.nan_to_num(self.values.values)


@dataclass(frozen=True)
class CombinedField:
    """Σ weight·field"""

    parts: tuple[tuple[float, Field], ...]

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        out = np.zeros(len(pts))
        for weight, part in self.parts:
            out += weight * part(pts)
        return out


def field_from_spec(spec: FieldSpec, dim: int) -> Field:
    if spec.grid_file is not None:
        from abreu_lab.storage import load_gridfn
        return SampledField(load_gridfn(spec.grid_file))
    terms = []
    for term in spec.terms:
        if len(term.powers) != dim:
            raise ConfigInvalid(f"monomial needs {dim} powers", context=term.powers)
        terms.append((term.coef, tuple(term.powers)))
    return PolynomialField(constant=spec.constant, terms=tuple(terms))


@dataclass(frozen=True)
class DensityPair:
    D: Field
    A: Field

    def check(self, points: np.ndarray) -> np.ndarray:
        values = self.D(points)
        bad = np.flatnonzero(~(values > 0))
        if bad.size:
            raise NonPositiveDensity("D must be positive", context=bad.tolist())
        return values

    def nodes(self, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
        d = np.full(grid.size, np.nan)
        a = np.full(grid.size, np.nan)
        pts = grid.points[grid.active]
        d[grid.active] = self.check(pts)
        a[grid.active] = self.A(pts)
        return d, a

    def sup_a(self, grid: Grid) -> float:
        return float(np.nanmax(self.nodes(grid)[1]))


def default_margin(grid: Grid) -> float:
    return 5.0 * float(grid.h.max()) * float(grid.polytope.normal_norms.max())


# ── 𝔽 and cofactors ──────────────────────────────────────────────────────

def mf_field(u: SPotential, dp: DensityPair) -> GridFn:
    """𝔽 = 𝔻/det(u_ij) on active nodes; Band values carry the boundary trace."""
    hf = u.hessian_field()
    d, _ = dp.nodes(u.grid)
    values = np.where(hf.det > 0, d / hf.det, np.nan)
    values[~u.grid.active] = np.nan
    return GridFn(u.grid, values)


@dataclass(frozen=True)
class CofactorField:
    U: np.ndarray           # (size, n, n), det(u_kl)·u^{ij}
    divergence: np.ndarray  # (size, n), Σ_i ∂_i U^{ij}
    diagnostic: float       # max |divergence| on the eroded mask


def cofactor_field(u: SPotential, margin: Optional[float] = None) -> CofactorField:
    grid = u.grid
    hf = u.hessian_field()
    U = adjugate(hf.hessian)
    n = grid.dim
    div = np.zeros((grid.size, n))
    for j in range(n):
        for i in range(n):
            div[:, j] += fd_gradient(GridFn(grid, U[:, i, j]))[:, i]
    mask = grid.mask(default_margin(grid) if margin is None else margin)
    diag = float(np.nanmax(np.abs(div[mask]))) if mask.any() else 0.0
    return CofactorField(U=U, divergence=div, diagnostic=diag)


# ── Residuals ────────────────────────────────────────────────────────────

def _second(grid: Grid, values: np.ndarray, i: int, j: int) -> np.ndarray:
    op, _ = grid.second[(i, j)]
    filled = np.nan_to_num(values)
    out = op @ filled
    out[(abs(op) @ np.isnan(values).astype(float)) > 0] = np.nan
    return out


def abreu_residual(
    u: SPotential,
    dp: DensityPair,
    form: ResidualForm = ResidualForm.primal,
    margin: Optional[float] = None,
    dual=None,
) -> GridFn:
    """Residual of the generalized Abreu equation on the eroded mask.

    All three forms are sign-aligned: a solution has r ≈ 0 and the forms
    agree with r_Primal up to discretization error.
    """
    grid = u.grid
    mask = grid.mask(default_margin(grid) if margin is None else margin)
    if form == ResidualForm.dual:
        r = _dual_residual(u, dp, mask, margin, dual)
    else:
        hf = u.hessian_field()
        d, a = dp.nodes(grid)
        n = grid.dim
        total = np.zeros(grid.size)
        if form == ResidualForm.primal:
            for i in range(n):
                for j in range(n):
                    total += _second(grid, d * hf.inverse[:, i, j], i, j)
            r = total / d + a
        else:
            U = adjugate(hf.hessian)
            mf = d / hf.det
            for i in range(n):
                for j in range(n):
                    total += U[:, i, j] * _second(grid, mf, i, j)
            r = (total + a * d) / d
    out = np.full(grid.size, np.nan)
    out[mask] = r[mask]
    return GridFn(grid, out)


def _dual_residual(u: SPotential, dp: DensityPair, mask: np.ndarray, margin, dual) -> np.ndarray:
    from abreu_lab.legendre import legendre_transform

    if dual is None:
        dual = legendre_transform(u, region_margin=margin)
    dgrid = dual.grid
    fh = fd_hessian_det(dual)
    xi = dual.gradient_map
    act = dgrid.active & np.isfinite(xi).all(axis=1)
    dx = np.full(dgrid.size, np.nan)
    ax = np.full(dgrid.size, np.nan)
    dx[act] = dp.check(xi[act])
    ax[act] = dp.A(xi[act])
    log_mf = np.log(dx * fh.det)
    log_d = np.log(dx)
    hess_f = fd_hessian(GridFn(dgrid, log_mf))
    grad_f = fd_gradient(GridFn(dgrid, log_mf))
    grad_d = fd_gradient(GridFn(dgrid, log_d))
    rx = (
        np.einsum("mij,mij->m", fh.inverse, hess_f)
        + np.einsum("mij,mi,mj->m", fh.inverse, grad_f, grad_d)
        + ax
    )
    rx[~_eroded(dgrid, DUAL_REACH)] = np.nan

    # pull back through the normal map, from cells with clean corners only
    grid = u.grid
    x = np.full((grid.size, grid.dim), np.nan)
    nodes = np.flatnonzero(mask)
    x[nodes] = u.gradient()[nodes]
    usable = np.isfinite(rx)
    inside = nodes[_clean_cells(dgrid, x[nodes], usable)]
    out = np.full(grid.size, np.nan)
    if inside.size:
        interp = dgrid.interpolation_matrix(x[inside], usable)
        out[inside] = interp @ np.nan_to_num(rx)
    if not np.isfinite(out).any():
        raise DualUnavailable("normal map does not reach the dual grid", context=int(mask.sum()))
    return out


def _eroded(grid: Grid, layers: int) -> np.ndarray:
    """Interior nodes at least `layers` nodes away from any non-Interior node."""
    inner = ndimage.binary_erosion(
        grid.interior.reshape(grid.shape), structure=np.ones((3,) * grid.dim, dtype=bool),
        iterations=layers, border_value=0,
    )
    return inner.ravel()


def _clean_cells(grid: Grid, points: np.ndarray, usable: np.ndarray) -> np.ndarray:
    """Points whose 2ⁿ surrounding nodes all exist and are usable."""
    shape = np.asarray(grid.shape)
    finite = np.isfinite(points).all(axis=1)
    base = np.floor((np.nan_to_num(points) - grid.lo) / grid.h - 0.5).astype(int)
    ok = finite & np.all((base >= 0) & (base <= shape - 2), axis=1)
    for corner in itertools.product((0, 1), repeat=grid.dim):
        idx = np.clip(base + np.asarray(corner), 0, shape - 1)
        ok &= usable[np.ravel_multi_index(tuple(idx.T), grid.shape)]
    return ok


def sup_norm(r: GridFn) -> float:
    vals = r.values[np.isfinite(r.values)]
    return float(np.abs(vals).max()) if vals.size else float("nan")


def residual_norms(
    u: SPotential,
    dp: DensityPair,
    margin: Optional[float] = None,
    forms: Sequence[ResidualForm] = (ResidualForm.primal, ResidualForm.cofactor),
) -> dict[str, float]:
    return {form.value: sup_norm(abreu_residual(u, dp, form, margin)) for form in forms}
