"""Local artifact store.

JSON reports with sorted keys, CSV traces, GridFn dumps (little-endian
float64 `.bin` plus a JSON header) and a separate metadata file holding
everything that varies between otherwise identical runs.
"""

import csv
import hashlib
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from abreu_lab.config import get_settings
from abreu_lab.errors import ConfigInvalid
from abreu_lab.grid import Grid, GridFn, classify
from abreu_lab.models import NodeKind
from abreu_lab.polytope import Polytope
from abreu_lab.potentials import SPotential

logger = logging.getLogger(__name__)
settings = get_settings()

HEADER_SUFFIX = ".json"
BINARY_SUFFIX = ".bin"


def _plain(obj: Any) -> Any:
    if isinstance(obj, BaseModel):
        return obj.model_dump(mode="json", by_alias=True)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _rle(flags: np.ndarray) -> list[list[int]]:
    """Run-length encoding [[kind, count], ...] of a flat NodeKind array."""
    runs: list[list[int]] = []
    for value in flags.tolist():
        if runs and runs[-1][0] == value:
            runs[-1][1] += 1
        else:
            runs.append([int(value), 1])
    return runs


def _unrle(runs: Sequence[Sequence[int]]) -> np.ndarray:
    return np.concatenate([np.full(count, kind, dtype=np.int8) for kind, count in runs])


class ArtifactStore:
    """Writes and reads run artifacts below one output directory."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def ensure_root(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        return self.root

    def path(self, name: str) -> Path:
        return self.ensure_root() / name

    # ── Reports ──────────────────────────────────────────────────────────

    @staticmethod
    def dumps(obj: Any) -> str:
        return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"

    def put_json(self, name: str, obj: Any) -> Path:
        target = self.path(name)
        target.write_text(self.dumps(obj), encoding="utf-8")
        logger.debug("Wrote %s", target)
        return target

    def get_json(self, name: str) -> Any:
        return json.loads((self.root / name).read_text(encoding="utf-8"))

    def put_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        target = self.path(name)
        with target.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow(["" if v is None else _plain(v) for v in row])
        logger.debug("Wrote %s", target)
        return target

    def put_metadata(self, config: Any, command: str) -> Path:
        """Timestamp, version and config digest, kept apart from the reports."""
        return self.put_json("metadata.json", {
            "command": command,
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "version": settings.app_version,
            "config_sha256": self.compute_hash(self.dumps(config).encode("utf-8")),
        })

    # ── Grid functions ───────────────────────────────────────────────────

    def put_gridfn(self, name: str, g: GridFn, extra: Optional[dict] = None) -> Path:
        """`name.bin` (row-major float64 LE), `name.json` header, `name.csv` node table."""
        grid = g.grid
        self.path(name + BINARY_SUFFIX).write_bytes(np.asarray(g.values, dtype="<f8").tobytes())
        header = {
            "dims": list(grid.shape),
            "h": grid.h.tolist(),
            "box": {"lo": grid.lo.tolist(), "hi": grid.hi.tolist()},
            "mask_rle": _rle(grid.flat_kind),
            "dtype": "<f8",
        }
        if grid.polytope is not None:
            header["polytope"] = {"rows": grid.polytope.as_rows(), "sigma_scale": grid.polytope.sigma_scale.tolist()}
        if extra:
            header.update(_plain(extra))
        target = self.put_json(name + HEADER_SUFFIX, header)
        active = np.flatnonzero(grid.active)
        self.put_csv(
            name + ".csv",
            [f"xi_{i + 1}" for i in range(grid.dim)] + ["kind", "value"],
            ([*grid.points[i].tolist(), NodeKind(int(grid.flat_kind[i])).name, float(g.values[i])] for i in active),
        )
        return target

    def put_potential(self, name: str, u: SPotential) -> Path:
        return self.put_gridfn(name, u.phi_fn, extra={"p_o": u.p_o.tolist(), "guillemin": u.guillemin})

    # ── Hashing ──────────────────────────────────────────────────────────

    @staticmethod
    def compute_hash(content: bytes) -> str:
        return hashlib.sha256(content).hexdigest()


def _header_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    if path.suffix in (HEADER_SUFFIX, BINARY_SUFFIX):
        path = path.with_suffix("")
    return path


def load_gridfn(path: Union[str, Path]) -> GridFn:
    """Read a dump written by ArtifactStore.put_gridfn (either file of the pair)."""
    base = _header_path(path)
    header_file = base.with_suffix(HEADER_SUFFIX)
    if not header_file.exists():
        raise ConfigInvalid("grid dump header not found", context=str(header_file))
    header = json.loads(header_file.read_text(encoding="utf-8"))
    values = np.frombuffer(base.with_suffix(BINARY_SUFFIX).read_bytes(), dtype="<f8").astype(float)
    shape = tuple(header["dims"])
    if values.size != int(np.prod(shape)):
        raise ConfigInvalid("grid dump size does not match its header", context=str(base))
    kind = _unrle(header["mask_rle"]).reshape(shape)
    polytope = None
    if "polytope" in header:
        polytope = Polytope.from_rows(header["polytope"]["rows"], sigma_scale=header["polytope"]["sigma_scale"])
    outside = kind == NodeKind.outside
    grid = Grid(lo=np.asarray(header["box"]["lo"], dtype=float), h=np.asarray(header["h"], dtype=float),
                shape=shape, kind=classify(outside), polytope=polytope)
    return GridFn(grid=grid, values=values)


def load_potential(path: Union[str, Path]) -> SPotential:
    base = _header_path(path)
    header = json.loads(base.with_suffix(HEADER_SUFFIX).read_text(encoding="utf-8"))
    g = load_gridfn(base)
    if g.grid.polytope is None:
        raise ConfigInvalid("potential dump carries no polytope", context=str(base))
    return SPotential(grid=g.grid, phi=g.values, p_o=np.asarray(header["p_o"], dtype=float),
                      guillemin=bool(header.get("guillemin", True)))
