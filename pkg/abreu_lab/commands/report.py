"""report: aggregate the reports found in the output directory and render a summary."""

import argparse
import logging

from jinja2 import Environment, FileSystemLoader, select_autoescape

from abreu_lab.config import TEMPLATES_DIR, get_settings

logger = logging.getLogger(__name__)
settings = get_settings()

HELP = "aggregate JSON reports and render summary.md"

SOURCES = {
    "solve": "solve_report.json",
    "stability": "stability_report.json",
    "estimates": "estimates.json",
    "barrier": "barrier_report.json",
    "legendre": "legendre_report.json",
    "continuation": "continuation.json",
}

templates = Environment(
    loader=FileSystemLoader(str(TEMPLATES_DIR)),
    autoescape=select_autoescape(enabled_extensions=("html",)),
    trim_blocks=True,
    lstrip_blocks=True,
)


def add_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--template", default="summary.md.j2", help="template name under templates/")


def run(ctx, args: argparse.Namespace) -> dict:
    store = ctx.store
    aggregate = {}
    for key, name in SOURCES.items():
        if (store.root / name).exists():
            aggregate[key] = store.get_json(name)
        else:
            logger.debug("No %s in %s", name, store.root)
    store.put_json("aggregate.json", aggregate)

    text = templates.get_template(args.template).render(
        app_name=settings.app_name, version=settings.app_version, output_dir=str(store.root), **aggregate,
    )
    store.path("summary.md").write_text(text, encoding="utf-8")
    return {"sections": sorted(aggregate)}
