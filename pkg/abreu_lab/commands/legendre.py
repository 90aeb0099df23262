"""legendre: dual dump of a potential plus involution and Young diagnostics."""

import argparse

import numpy as np

from abreu_lab.legendre import evaluate_dual, involution_error, legendre_transform, young_error

HELP = "Legendre-transform a potential and check the round trip"


def add_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--potential", help="GridFn dump of a potential (defaults to the config's, then Guillemin)")


def run(ctx, args: argparse.Namespace) -> dict:
    lc = ctx.config.legendre
    u = ctx.potential(args.potential)
    f = legendre_transform(u, dual_box=lc.dual_box, dual_h=lc.dual_h,
                           region_margin=lc.region_margin, inflate=lc.inflate)

    grid = f.grid
    diagnostics = {
        "h": float(u.grid.h.min()),
        "dual_h": float(grid.h.min()),
        "dual_box": [grid.lo.tolist(), grid.hi.tolist()],
        "masked_nodes": int((~grid.active).sum()),
        "young_error": young_error(u, f, lc.region_margin),
        "involution_error": involution_error(u, f, lc.region_margin),
        "f_at_origin": None,
    }
    origin = np.zeros(grid.dim)
    if np.all((grid.lo < origin) & (origin < grid.hi)):
        diagnostics["f_at_origin"] = float(evaluate_dual(f, origin)[0])

    store = ctx.store
    store.put_gridfn("dual", f, extra={"dual_box": diagnostics["dual_box"]})
    live = np.flatnonzero(grid.active)
    store.put_csv(
        "dual_gradient_map.csv",
        [f"x_{i + 1}" for i in range(grid.dim)] + [f"xi_{i + 1}" for i in range(grid.dim)],
        ([*grid.points[i].tolist(), *f.gradient_map[i].tolist()] for i in live),
    )
    store.put_json("legendre_report.json", diagnostics)
    return {k: diagnostics[k] for k in ("young_error", "involution_error", "f_at_origin")}
