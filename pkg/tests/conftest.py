import json

import numpy as np
import pytest

from abreu_lab.grid import Grid
from abreu_lab.operator import DensityPair, PolynomialField
from abreu_lab.polytope import Polytope
from abreu_lab.potentials import SPotential
from abreu_lab.storage import ArtifactStore

INTERVAL_ROWS = [[1.0, 0.0], [-1.0, -1.0]]
SQUARE_ROWS = [[1.0, 0.0, 0.0], [-1.0, 0.0, -1.0], [0.0, 1.0, 0.0], [0.0, -1.0, -1.0]]


def density(D: float = 1.0, A: float = 0.0) -> DensityPair:
    return DensityPair(D=PolynomialField(constant=D), A=PolynomialField(constant=A))


@pytest.fixture
def interval() -> Polytope:
    return Polytope.interval()


@pytest.fixture
def square() -> Polytope:
    return Polytope.unit_cube(2)


@pytest.fixture
def cp1() -> DensityPair:
    return density(1.0, 2.0)


@pytest.fixture
def cp1xcp1() -> DensityPair:
    return density(1.0, 4.0)


@pytest.fixture
def guillemin_interval(interval):
    def make(h: float = 1 / 256) -> SPotential:
        return SPotential.initial(Grid.build(interval, h), [0.5])
    return make


@pytest.fixture
def guillemin_square(square):
    def make(h: float = 1 / 64) -> SPotential:
        return SPotential.initial(Grid.build(square, h), [0.5, 0.5])
    return make


@pytest.fixture
def store(tmp_path) -> ArtifactStore:
    return ArtifactStore(tmp_path / "out")


@pytest.fixture
def write_config(tmp_path):
    """Write a run configuration whose output_dir points into tmp_path."""
    def write(name: str = "run.json", **fields) -> str:
        doc = {"schema_version": 1, "output_dir": str(tmp_path / "out")}
        doc.update(fields)
        path = tmp_path / name
        path.write_text(json.dumps(doc), encoding="utf-8")
        return str(path)
    return write


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
