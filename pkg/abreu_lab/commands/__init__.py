"""Subcommands. Each module exposes HELP, add_arguments(parser) and run(ctx, args)."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from abreu_lab.errors import ConfigInvalid
from abreu_lab.grid import Grid
from abreu_lab.models import Containment, RunConfig
from abreu_lab.operator import DensityPair, field_from_spec
from abreu_lab.polytope import Polytope
from abreu_lab.potentials import SPotential
from abreu_lab.storage import ArtifactStore, load_potential

logger = logging.getLogger(__name__)


@dataclass
class RunContext:
    config: RunConfig
    polytope: Polytope
    dp: DensityPair
    p_o: np.ndarray
    store: ArtifactStore

    @classmethod
    def build(cls, config: RunConfig) -> "RunContext":
        spec = config.polytope
        polytope = Polytope.from_rows(spec.rows, vertices=spec.vertices, sigma_scale=spec.sigma_scale)
        dim = polytope.dim
        dp = DensityPair(D=field_from_spec(config.D, dim), A=field_from_spec(config.A, dim))
        p_o = polytope.interior_point if config.p_o is None else np.asarray(config.p_o, dtype=float)
        if polytope.contains(p_o) != Containment.interior:
            raise ConfigInvalid("p_o must be strictly interior", context=p_o.tolist())
        return cls(config=config, polytope=polytope, dp=dp, p_o=p_o, store=ArtifactStore(config.output_dir))

    def grid(self, h: Optional[float] = None) -> Grid:
        return Grid.build(self.polytope, self.config.solver.h if h is None else h)

    def potential(self, path: Optional[str] = None) -> SPotential:
        """The potential named on the command line or in the config, else the Guillemin potential."""
        path = path or self.config.potential
        if path:
            u = load_potential(path)
            logger.info("Loaded potential from %s on grid %s", path, u.grid.shape)
            return u
        return SPotential.initial(self.grid(), self.p_o)
