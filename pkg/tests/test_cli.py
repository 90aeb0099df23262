import json
import logging

import numpy as np
import pytest

from abreu_lab.commands import RunContext
from abreu_lab.errors import ConfigInvalid
from abreu_lab.main import apply_overrides, build_parser, load_config, parse_overrides, run
from abreu_lab.solver import solve
from abreu_lab.storage import ArtifactStore, load_potential

from tests.conftest import INTERVAL_ROWS, SQUARE_ROWS

CP1 = {
    "polytope": {"rows": INTERVAL_ROWS},
    "D": {"constant": 1.0},
    "A": {"constant": 2.0},
    "p_o": [0.5],
    "solver": {"h": 1 / 128},
    "family": {"max_kinks": 2, "samples": 50},
}


def _read(tmp_path, name):
    return json.loads((tmp_path / "out" / name).read_text(encoding="utf-8"))


# ── Overrides ────────────────────────────────────────────────────────────

def test_parse_overrides():
    pairs = parse_overrides(["--seed", "7", "--max-kinks=1", "--kind", "EdgeBarrier", "--p_o", "[0.25]"])
    assert pairs == [("seed", 7), ("max_kinks", 1), ("kind", "EdgeBarrier"), ("p_o", [0.25])]


@pytest.mark.parametrize("tokens", [["stray"], ["--seed"], ["--"]])
def test_parse_overrides_rejects(tokens):
    with pytest.raises(ConfigInvalid):
        parse_overrides(tokens)


def test_dotted_override_creates_section():
    raw = {"polytope": {"rows": INTERVAL_ROWS}}
    out = apply_overrides(raw, [("legendre.inflate", 0.2)])
    assert out["legendre"] == {"inflate": 0.2}


def test_leaf_override_prefers_raw_document(write_config):
    path = write_config(**CP1)
    cfg = load_config(path, [("samples", 300)])
    assert cfg.family.samples == 300
    assert cfg.barrier.samples == 200


def test_ambiguous_override(write_config):
    path = write_config(polytope={"rows": SQUARE_ROWS}, A={"constant": 4.0})
    with pytest.raises(ConfigInvalid, match="ambiguous"):
        load_config(path, [("samples", 300)])


def test_unknown_override(write_config):
    path = write_config(**CP1)
    with pytest.raises(ConfigInvalid, match="matches no config field"):
        load_config(path, [("nonsense", 1)])


def test_invalid_config_lists_locations(write_config):
    path = write_config(polytope={"rows": INTERVAL_ROWS}, solver={"h": -1.0}, p_o=[0.5, 0.5])
    with pytest.raises(ConfigInvalid) as info:
        load_config(path)
    assert any(m.startswith("solver.h") for m in info.value.context)


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigInvalid):
        load_config(str(bad))
    with pytest.raises(ConfigInvalid):
        load_config(str(tmp_path / "missing.json"))


def test_parser_lists_every_subcommand():
    parser = build_parser()
    for name in ("solve", "stability", "validate", "barrier", "legendre", "continuation", "report"):
        args, extra = parser.parse_known_args([name, "cfg.json", "--seed", "3"])
        assert args.command == name
        assert extra == ["--seed", "3"]


# ── Exit codes ───────────────────────────────────────────────────────────

def test_unbalanced_data_exits_2(write_config, caplog):
    path = write_config(polytope={"rows": SQUARE_ROWS}, A={"constant": 0.0}, solver={"h": 1 / 32})
    with caplog.at_level(logging.WARNING, logger="abreu_lab"):
        assert run(["solve", path]) == 2
    assert "L_A(1)" in caplog.text


def test_invalid_config_exits_2(write_config):
    path = write_config(polytope={"rows": INTERVAL_ROWS}, solver={"h": 0})
    assert run(["solve", path]) == 2


def test_p_o_outside_exits_2(write_config):
    path = write_config(**{**CP1, "p_o": [1.5]})
    assert run(["stability", path]) == 2


def test_numerical_failure_exits_1(write_config):
    path = write_config(**{**CP1, "solver": {"h": 0.5}})
    assert run(["stability", path]) == 1


def test_defect_tolerance_comes_from_thresholds(write_config):
    # D = 1 + ξ, A = (6 + 36ξ)/13 balances in the continuum; its discrete defect at h = 1/64 is O(h²)
    balanced = {**CP1, "D": {"constant": 1.0, "terms": [{"coef": 1.0, "powers": [1]}]},
                "A": {"constant": 6 / 13, "terms": [{"coef": 36 / 13, "powers": [1]}]},
                "solver": {"h": 1 / 64}}
    path = write_config(**balanced)
    assert run(["stability", path]) == 2
    assert run(["stability", path, "--defect_rel_tol", "1e-3"]) == 0
    relaxed = write_config(name="relaxed.json", **{**balanced, "thresholds": {"defect_rel_tol": 1e-3}})
    assert load_config(relaxed).thresholds.defect_rel_tol == 1e-3
    assert run(["stability", relaxed]) == 0


# ── Subcommands ──────────────────────────────────────────────────────────

def test_stability_with_overrides(write_config, tmp_path):
    path = write_config(**CP1)
    assert run(["stability", path, "--seed", "7", "--samples", "300"]) == 0
    report = _read(tmp_path, "stability_report.json")
    assert report["seed"] == 7
    assert report["samples"] == 300
    assert report["lambda_hat"] == pytest.approx(0.5, abs=0.05)
    assert _read(tmp_path, "witness.json") == report["witness"]
    meta = _read(tmp_path, "metadata.json")
    assert meta["command"] == "stability"


def test_stability_witness_replay(write_config, tmp_path):
    path = write_config(**CP1)
    assert run(["stability", path]) == 0
    witness = str(tmp_path / "out" / "witness.json")
    assert run(["stability", path, "--witness", witness]) == 0
    replay = _read(tmp_path, "witness_replay.json")
    assert replay["ratio"] == pytest.approx(replay["stored_ratio"], abs=1e-12)


def test_barrier_command(write_config, tmp_path):
    path = write_config(polytope={"rows": SQUARE_ROWS}, A={"constant": 4.0},
                        barrier={"kind": "EdgeBarrier", "dim": 2, "alpha": 0.5, "beta": 0.5, "samples": 50})
    assert run(["barrier", path]) == 0
    report = _read(tmp_path, "barrier_report.json")
    assert report["pass"]
    assert report["extras"]["alpha_schedule"] is None
    assert "schedule_error" in report["extras"]


def test_barrier_schedule_for_four_dimensions(write_config, tmp_path):
    path = write_config(polytope={"rows": SQUARE_ROWS}, A={"constant": 4.0},
                        barrier={"kind": "EdgeBarrier", "dim": 4, "alpha": 0.5, "beta": 0.5, "samples": 20})
    assert run(["barrier", path]) == 0
    extras = _read(tmp_path, "barrier_report.json")["extras"]
    assert extras["alpha_schedule"] == ["1/2", "7/8"]
    assert extras["k_star"] == 1


def test_report_after_stability(write_config, tmp_path):
    path = write_config(**CP1)
    assert run(["stability", path]) == 0
    assert run(["report", path]) == 0
    aggregate = _read(tmp_path, "aggregate.json")
    assert sorted(aggregate) == ["stability"]
    summary = (tmp_path / "out" / "summary.md").read_text(encoding="utf-8")
    assert "## Stability" in summary
    assert "## Solve" not in summary


def test_legendre_command(write_config, tmp_path):
    path = write_config(**CP1)
    assert run(["legendre", path]) == 0
    report = _read(tmp_path, "legendre_report.json")
    assert report["young_error"] <= 5 / 128
    assert (tmp_path / "out" / "dual.bin").exists()


@pytest.mark.slow
def test_solve_then_validate(write_config, tmp_path):
    path = write_config(**CP1)
    assert run(["solve", path, "--no-audit"]) == 0
    assert _read(tmp_path, "solve_report.json")["converged"]
    meta = _read(tmp_path, "metadata.json")
    cfg = load_config(path)
    assert meta["command"] == "solve"
    assert meta["config_sha256"] == ArtifactStore.compute_hash(ArtifactStore.dumps(cfg).encode("utf-8"))

    ctx = RunContext.build(cfg)
    u, _ = solve(ctx.polytope, ctx.dp, cfg.solver, p_o=ctx.p_o)
    back = load_potential(tmp_path / "out" / "phi.json")
    np.testing.assert_array_equal(back.grid.flat_kind, u.grid.flat_kind)
    np.testing.assert_array_equal(back.p_o, u.p_o)
    act = u.grid.active
    np.testing.assert_allclose(back.values()[act], u.values()[act], rtol=0, atol=1e-12)
    assert back.evaluate(back.p_o)[0] == pytest.approx(0.0, abs=1e-10)

    phi = str(tmp_path / "out" / "phi.json")
    assert run(["validate", path, "--potential", phi, "--lower-only"]) == 0
    names = [r["name"] for r in _read(tmp_path, "estimates.json")]
    assert "det_lower" in names
    assert _read(tmp_path, "metadata.json")["command"] == "validate"


@pytest.mark.slow
def test_continuation_command(write_config, tmp_path):
    path = write_config(**{**CP1, "solver": {"h": 1 / 64}, "continuation": {"k_max": 3}})
    assert run(["continuation", path, "--keep-potentials"]) == 0
    steps = _read(tmp_path, "continuation.json")
    assert [s["k"] for s in steps] == [1, 2, 3]
    assert all(s["status"] == "ok" for s in steps)
    assert (tmp_path / "out" / "phi_k3.bin").exists()
    header = (tmp_path / "out" / "continuation.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header.startswith("k,status,converged")
