"""validate: estimate validators for a stored (or the Guillemin) potential."""

import argparse

from abreu_lab.estimates import det_lower_report, det_upper_report, guillemin_distance_bound

HELP = "run the determinant estimate validators on a potential"


def add_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--potential", help="GridFn dump of a potential (defaults to the config's, then Guillemin)")
    parser.add_argument("--lower-only", action="store_true", help="skip the dual upper bound and distance bound")


def run(ctx, args: argparse.Namespace) -> dict:
    cfg = ctx.config
    u = ctx.potential(args.potential)
    lower, edge = det_lower_report(u, ctx.dp, cfg.estimates, cfg.thresholds)
    reports = [lower, edge]
    if not args.lower_only:
        reports.append(det_upper_report(u, ctx.dp, cfg.estimates, cfg.thresholds, cfg.legendre))
        reports.append(guillemin_distance_bound(u.polytope, cfg.estimates, cfg.thresholds))

    ctx.store.put_json("estimates.json", reports)
    ctx.store.put_csv(
        "edge_probes.csv",
        ["facet", "delta", "det", "fitted"],
        ([f["facet"], *row] for f in edge.extras["facets"] for row in f["probe"]),
    )
    return {r.name: {"measured_constant": r.measured_constant, "pass": r.passed} for r in reports}
