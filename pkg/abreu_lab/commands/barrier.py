"""barrier: closed-form barrier Hessians against the finite-difference oracle."""

import argparse

from abreu_lab.errors import ScheduleDegenerate
from abreu_lab.estimates import barrier_hessian_check
from abreu_lab.potentials import BarrierSpec, alpha_schedule

HELP = "check the barrier Hessian formulas and the exponent schedule"


def add_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--step", type=float, default=1e-3, help="finite-difference oracle step")


def run(ctx, args: argparse.Namespace) -> dict:
    cfg = ctx.config
    b = cfg.barrier
    polytope = ctx.polytope if ctx.polytope.dim == b.dim else None
    spec = BarrierSpec.build(b.kind, b.dim, b.alpha, b.beta, C=b.C, a=b.a, polytope=polytope)
    report = barrier_hessian_check(spec, b.samples, cfg.seed, cfg.thresholds, step=args.step)

    try:
        schedule = alpha_schedule(b.dim)
        report.extras["alpha_schedule"] = [str(a) for a in schedule.alphas]
        report.extras["k_star"] = schedule.k_star
    except ScheduleDegenerate as exc:
        report.extras["alpha_schedule"] = None
        report.extras["schedule_error"] = exc.detail

    ctx.store.put_json("barrier_report.json", report)
    return {"measured_constant": report.measured_constant, "pass": report.passed}
