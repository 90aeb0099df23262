"""Command-line entry point: `abreu-lab <subcommand> <config> [--key value]...`."""

import argparse
import json
import logging
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import ValidationError

from abreu_lab.commands import (
    RunContext,
    barrier,
    continuation,
    legendre,
    report,
    solve,
    stability,
    validate,
)
from abreu_lab.config import get_settings
from abreu_lab.errors import AbreuLabError, ConfigInvalid, RefusalError
from abreu_lab.models import RunConfig

settings = get_settings()
logger = logging.getLogger("abreu_lab")

COMMANDS = {
    "solve": solve,
    "stability": stability,
    "validate": validate,
    "barrier": barrier,
    "legendre": legendre,
    "continuation": continuation,
    "report": report,
}


def configure_logging() -> None:
    level = logging.DEBUG if settings.debug else getattr(logging, settings.log_level.upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abreu-lab",
        description="Numerical toolkit for the generalized Abreu equation on convex polytopes.",
        epilog="Unrecognised --key value pairs override config leaves (dotted path or unique leaf name).",
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.app_version}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name, module in COMMANDS.items():
        p = sub.add_parser(name, help=module.HELP, allow_abbrev=False)
        p.add_argument("config", help="run configuration (JSON)")
        module.add_arguments(p)
    return parser


# ── Configuration ────────────────────────────────────────────────────────

def parse_overrides(tokens: Sequence[str]) -> list[tuple[str, Any]]:
    """`--key value` and `--key=value` pairs; values are JSON when they parse, strings otherwise."""
    pairs = []
    it = iter(tokens)
    for token in it:
        if not token.startswith("--") or len(token) == 2:
            raise ConfigInvalid(f"unexpected argument {token!r}")
        key, eq, raw = token[2:].partition("=")
        if not eq:
            raw = next(it, None)
            if raw is None:
                raise ConfigInvalid(f"override --{key} needs a value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        pairs.append((key.replace("-", "_"), value))
    return pairs


def _leaf_paths(doc: Any, prefix: tuple = ()) -> list[tuple]:
    if isinstance(doc, dict):
        return [p for k, v in doc.items() for p in _leaf_paths(v, prefix + (k,))]
    return [prefix]


def _resolve(key: str, raw: dict, full: dict) -> tuple:
    if "." in key:
        return tuple(key.split("."))
    for doc in (raw, full):
        hits = [p for p in _leaf_paths(doc) if p and p[-1] == key]
        if len(hits) == 1:
            return hits[0]
        if len(hits) > 1:
            raise ConfigInvalid(f"override --{key} is ambiguous",
                                context=[".".join(p) for p in hits])
    raise ConfigInvalid(f"override --{key} matches no config field")


def apply_overrides(raw: dict, overrides: Sequence[tuple[str, Any]]) -> dict:
    full = _validate(raw).model_dump(mode="json") if overrides else raw
    for key, value in overrides:
        path = _resolve(key, raw, full)
        node = raw
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[path[-1]] = value
        logger.debug("Override %s = %r", ".".join(path), value)
    return raw


def _validate(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        messages = [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()]
        raise ConfigInvalid("invalid run configuration: " + "; ".join(messages), context=messages)


def load_config(path: str, overrides: Sequence[tuple[str, Any]] = ()) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config: {exc.strerror}", context=path)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"config is not valid JSON: {exc}", context=path)
    if not isinstance(raw, dict):
        raise ConfigInvalid("config must be a JSON object", context=path)
    return _validate(apply_overrides(raw, overrides))


# ── Entry point ──────────────────────────────────────────────────────────

def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse, dispatch and map errors to exit codes (0 ok, 2 refusal, 1 failure)."""
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = load_config(args.config, parse_overrides(extra))
        ctx = RunContext.build(cfg)
        logger.info("Starting %s v%s: %s %s", settings.app_name, settings.app_version, args.command, args.config)
        summary = COMMANDS[args.command].run(ctx, args)
        ctx.store.put_metadata(cfg, args.command)
        logger.info("%s finished: %s", args.command, summary)
        return 0
    except RefusalError as exc:
        logger.warning("Refused: %s", exc)
        return exc.exit_code
    except AbreuLabError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except Exception as exc:
        logger.exception("Unhandled exception: %s", exc)
        return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    return run(argv)


if __name__ == "__main__":
    raise SystemExit(main())
