import numpy as np
import pytest

from abreu_lab.errors import ConfigInvalid, NonPositiveDensity
from abreu_lab.estimates import convergence_order
from abreu_lab.grid import Grid
from abreu_lab.models import FieldSpec, ResidualForm
from abreu_lab.operator import (
    CombinedField, DensityPair, PolynomialField, abreu_residual, cofactor_field, field_from_spec, mf_field,
    residual_norms, sup_norm,
)
from abreu_lab.potentials import SPotential

from tests.conftest import density


def test_field_from_spec():
    spec = FieldSpec(constant=1.0, terms=[{"coef": 2.0, "powers": [1, 0]}, {"coef": -1.0, "powers": [0, 2]}])
    field = field_from_spec(spec, 2)
    np.testing.assert_allclose(field(np.array([[0.5, 2.0], [1.0, 0.0]])), [1.0 + 1.0 - 4.0, 3.0])


def test_field_from_spec_dimension_mismatch():
    spec = FieldSpec(terms=[{"coef": 1.0, "powers": [1]}])
    with pytest.raises(ConfigInvalid):
        field_from_spec(spec, 2)


def test_combined_field():
    field = CombinedField(((1.0, PolynomialField(constant=2.0)), (0.5, PolynomialField(terms=((4.0, (1,)),)))))
    np.testing.assert_allclose(field(np.array([[0.25], [1.0]])), [2.5, 4.0])


def test_density_must_be_positive(square):
    dp = DensityPair(D=PolynomialField(constant=-1.0), A=PolynomialField())
    with pytest.raises(NonPositiveDensity):
        dp.nodes(Grid.build(square, 1 / 8))


def test_mf_field_interval(interval):
    # odd cell count puts a node at 1/2
    u = SPotential.initial(Grid.build(interval, 1 / 255), [0.5])
    mf = mf_field(u, density(1.0, 2.0))
    centre = u.grid.nearest([0.5])
    assert u.grid.points[centre, 0] == pytest.approx(0.5)
    assert mf.values[centre] == pytest.approx(0.25)
    band = u.grid.band
    assert np.nanmax(mf.values[band]) <= 2 * u.grid.h[0]


def test_primal_residual_interval(guillemin_interval, cp1):
    u = guillemin_interval(1 / 256)
    r = abreu_residual(u, cp1, ResidualForm.primal, margin=0.1)
    assert sup_norm(r) <= 1e-6
    assert np.isnan(r.values[~u.grid.mask(0.1)]).all()


def test_residual_forms_square(guillemin_square, cp1xcp1):
    u = guillemin_square(1 / 64)
    norms = residual_norms(u, cp1xcp1, margin=0.1)
    assert norms[ResidualForm.primal.value] <= 1e-6
    assert norms[ResidualForm.cofactor.value] <= 1e-6


def test_wrong_data_leaves_residual(guillemin_interval):
    u = guillemin_interval(1 / 128)
    r = abreu_residual(u, density(1.0, 3.0), ResidualForm.primal, margin=0.1)
    np.testing.assert_allclose(r.values[np.isfinite(r.values)], 1.0, atol=1e-6)


def _smooth_convex(p):
    return np.exp(p[:, 0] + 0.5 * p[:, 1]) + 0.5 * (p ** 2).sum(axis=1)


def test_cofactor_divergence_converges_at_second_order(square):
    hs = [1 / 16, 1 / 32, 1 / 64]
    diags = []
    for h in hs:
        u = SPotential.from_function(Grid.build(square, h), _smooth_convex, [0.5, 0.5])
        diags.append(cofactor_field(u, margin=0.1).diagnostic)
    assert diags[-1] < diags[0]
    assert convergence_order(hs, diags) >= 1.8


def test_primal_and_cofactor_forms_agree_under_refinement(square):
    dp = density(1.0, 0.0)
    hs = [1 / 16, 1 / 32, 1 / 64]
    gaps = []
    for h in hs:
        u = SPotential.from_function(Grid.build(square, h), _smooth_convex, [0.5, 0.5])
        primal = abreu_residual(u, dp, ResidualForm.primal, margin=0.1)
        cofactor = abreu_residual(u, dp, ResidualForm.cofactor, margin=0.1)
        finite = np.isfinite(primal.values) & np.isfinite(cofactor.values)
        gaps.append(float(np.abs(primal.values[finite] - cofactor.values[finite]).max()))
    assert convergence_order(hs, gaps) >= 1.8


def test_dual_residual_converges_and_matches_primal(interval, cp1):
    norms, gaps = [], []
    for h in (1 / 64, 1 / 128, 1 / 256):
        u = SPotential.initial(Grid.build(interval, h), [0.5])
        dual = abreu_residual(u, cp1, ResidualForm.dual, margin=0.1).values
        primal = abreu_residual(u, cp1, ResidualForm.primal, margin=0.1).values
        finite = np.isfinite(dual) & np.isfinite(primal)
        assert finite.sum() >= 0.5 * u.grid.mask(0.1).sum()
        norms.append(float(np.abs(dual[finite]).max()))
        gaps.append(float(np.abs(dual[finite] - primal[finite]).max()))
    assert norms[0] > norms[1] > norms[2]
    assert norms[-1] <= 5e-4
    assert gaps[-1] <= 5e-4
