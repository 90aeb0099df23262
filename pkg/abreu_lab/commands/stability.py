"""stability: family infimum of the stability ratio, or replay of a stored witness."""

import argparse
import json
from pathlib import Path

from abreu_lab.errors import ConfigInvalid
from abreu_lab.functionals import replay_witness, stability_lambda
from abreu_lab.models import Witness

HELP = "estimate the uniform K-stability constant over a PL family"


def add_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--witness", help="replay a stored witness (witness.json or stability_report.json)")


def _read_witness(path: str) -> Witness:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read witness: {exc}", context=path)
    return Witness.model_validate(data.get("witness", data))


def run(ctx, args: argparse.Namespace) -> dict:
    cfg = ctx.config
    grid = ctx.grid()
    if args.witness:
        witness = _read_witness(args.witness)
        ratio = replay_witness(grid, ctx.dp, witness)
        ctx.store.put_json("witness_replay.json", {"witness": witness, "ratio": ratio,
                                                   "stored_ratio": witness.ratio})
        return {"ratio": ratio, "stored_ratio": witness.ratio}

    report = stability_lambda(grid, ctx.dp, cfg.family, cfg.seed, ctx.p_o,
                              defect_rel_tol=cfg.thresholds.defect_rel_tol)
    ctx.store.put_json("stability_report.json", report)
    ctx.store.put_json("witness.json", report.witness)
    return {"lambda_hat": report.lambda_hat, "label": report.label}
