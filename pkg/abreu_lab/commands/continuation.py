"""continuation: solve along A^(k) → A with warm starts and per-index diagnostics."""

import argparse

from abreu_lab.models import ContinuationSpec
from abreu_lab.solver import continuation, continuation_sequence

HELP = "run the continuation sequence A^(k) -> A"

COLUMNS = ["k", "status", "converged", "mabuchi", "sup_gap", "third_derivative_gap",
           "boundary_mass", "boundary_mass_bound", "lambda_hat", "lambda_consistent"]


def add_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--keep-potentials", action="store_true", help="dump φ for every successful index")


def run(ctx, args: argparse.Namespace) -> dict:
    cfg = ctx.config
    spec = cfg.continuation or ContinuationSpec()
    dp_seq = continuation_sequence(spec, ctx.dp.D, ctx.dp.A, ctx.polytope.dim, grid=ctx.grid())
    result = continuation(ctx.polytope, dp_seq, cfg.solver, p_o=ctx.p_o, family=cfg.family,
                          seed=cfg.seed, omega_margin=spec.omega_margin,
                          defect_rel_tol=cfg.thresholds.defect_rel_tol)

    store = ctx.store
    store.put_json("continuation.json", result.steps)
    store.put_csv("continuation.csv", COLUMNS, (
        [s.k, s.status,
         None if s.report is None else s.report.converged,
         None if s.report is None else s.report.mabuchi,
         s.sup_gap, s.third_derivative_gap, s.boundary_mass, s.boundary_mass_bound,
         s.lambda_hat, s.lambda_consistent]
        for s in result.steps
    ))
    last = None
    for step, u in zip(result.steps, result.potentials):
        if u is None:
            continue
        if args.keep_potentials:
            store.put_potential(f"phi_k{step.k}", u)
        last = u
    if last is not None:
        store.put_potential("phi", last)
    ok = sum(s.status == "ok" for s in result.steps)
    return {"indices": len(result.steps), "ok": ok}
