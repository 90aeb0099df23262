"""solve: minimise 𝓕_A and write the report, φ★ and the residual field."""

import argparse

from abreu_lab.estimates import det_lower_report
from abreu_lab.grid import GridFn
from abreu_lab.models import ResidualForm
from abreu_lab.operator import abreu_residual, default_margin
from abreu_lab.solver import solve

HELP = "solve the generalized Abreu equation by Mabuchi minimisation"


def add_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--no-audit", action="store_true", help="skip the stability audit attached to the report")


def run(ctx, args: argparse.Namespace) -> dict:
    cfg = ctx.config
    family = None if args.no_audit else cfg.family
    u, report = solve(ctx.polytope, ctx.dp, cfg.solver, p_o=ctx.p_o, family=family, seed=cfg.seed,
                      defect_rel_tol=cfg.thresholds.defect_rel_tol)
    report.estimates = list(det_lower_report(u, ctx.dp, cfg.estimates, cfg.thresholds))

    margin = default_margin(u.grid) if cfg.solver.margin is None else cfg.solver.margin
    residual: GridFn = abreu_residual(u, ctx.dp, ResidualForm.primal, margin)
    store = ctx.store
    store.put_json("solve_report.json", report)
    store.put_potential("phi", u)
    store.put_gridfn("residual_primal", residual)
    return {"converged": report.converged, "mabuchi": report.mabuchi, "iterations": report.iterations}
