import json

import numpy as np
import pytest

from abreu_lab.errors import ConfigInvalid
from abreu_lab.estimates import det_lower_report
from abreu_lab.grid import Grid, GridFn
from abreu_lab.models import RunConfig
from abreu_lab.polytope import Polytope
from abreu_lab.rng import stream
from abreu_lab.storage import ArtifactStore, load_gridfn, load_potential

from tests.conftest import SQUARE_ROWS


def test_gridfn_dump_round_trip(store):
    tri = Polytope.from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, -1.0, -1.0]])
    grid = Grid.build(tri, 1 / 16)
    g = GridFn.sample(grid, lambda p: p[:, 0] - 2 * p[:, 1])
    store.put_gridfn("field", g)

    back = load_gridfn(store.root / "field.bin")
    assert back.grid.shape == grid.shape
    np.testing.assert_array_equal(back.grid.flat_kind, grid.flat_kind)
    np.testing.assert_array_equal(np.isnan(back.values), np.isnan(g.values))
    np.testing.assert_array_equal(np.nan_to_num(back.values), np.nan_to_num(g.values))
    assert back.grid.polytope.as_rows() == tri.as_rows()


def test_gridfn_csv_lists_active_nodes(store, square):
    grid = Grid.build(square, 1 / 8)
    store.put_gridfn("ones", GridFn.sample(grid, lambda p: np.ones(len(p))))
    lines = (store.root / "ones.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "xi_1,xi_2,kind,value"
    assert len(lines) - 1 == int(grid.active.sum())


def test_missing_header(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_gridfn(tmp_path / "absent.bin")


def test_truncated_dump(store, square):
    grid = Grid.build(square, 1 / 8)
    store.put_gridfn("cut", GridFn.sample(grid, lambda p: p[:, 0]))
    path = store.root / "cut.bin"
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ConfigInvalid):
        load_gridfn(path)


def test_reports_are_byte_identical(store):
    report = {"b": [1.0, np.float64(0.5)], "a": np.arange(3)}
    first = store.put_json("r.json", report).read_bytes()
    second = store.put_json("r.json", report).read_bytes()
    assert first == second
    assert list(json.loads(first)) == ["a", "b"]


def test_metadata_hashes_config(store):
    cfg = RunConfig.model_validate({"polytope": {"rows": SQUARE_ROWS}, "A": {"constant": 4.0}})
    meta = json.loads(store.put_metadata(cfg, "solve").read_text(encoding="utf-8"))
    assert meta["command"] == "solve"
    assert meta["config_sha256"] == ArtifactStore.compute_hash(ArtifactStore.dumps(cfg).encode("utf-8"))
    assert "timestamp" in meta


def test_reloaded_potential_gives_same_estimates(store, guillemin_interval, cp1):
    u = guillemin_interval(1 / 64)
    u = u.with_phi(np.where(u.grid.active, 0.1 * (u.grid.points[:, 0] - 0.5) ** 2, np.nan))
    store.put_potential("phi", u)
    back = load_potential(store.root / "phi.json")
    np.testing.assert_array_equal(back.p_o, u.p_o)
    assert back.guillemin
    first, _ = det_lower_report(u, cp1)
    second, _ = det_lower_report(back, cp1)
    assert first.model_dump() == second.model_dump()


def test_named_streams_are_independent():
    a = stream(7, "family").random(5)
    stream(7, "barrier").random(100)
    np.testing.assert_array_equal(stream(7, "family").random(5), a)
    assert not np.array_equal(stream(7, "barrier").random(5), a)
    assert not np.array_equal(stream(8, "family").random(5), a)
