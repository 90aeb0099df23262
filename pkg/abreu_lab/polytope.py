"""Bounded open polytopes given by facet data.

Δ = {ξ : δ_k(ξ) = ⟨a_k, ξ⟩ − c_k > 0 for every facet k}.
"""

import itertools
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog

from abreu_lab.config import get_settings
from abreu_lab.errors import InvalidPolytope, PointOutside
from abreu_lab.models import Containment

logger = logging.getLogger(__name__)
settings = get_settings()


@dataclass(frozen=True, eq=False)
class Polytope:
    normals: np.ndarray       # (k, n) rows a_k, stored as configured
    offsets: np.ndarray       # (k,) c_k
    vertices: np.ndarray      # (m, n)
    sigma_scale: np.ndarray   # (k,) weight of dσ per facet

    def __post_init__(self):
        for arr in (self.normals, self.offsets, self.vertices, self.sigma_scale):
            arr.setflags(write=False)

    # ── Construction ─────────────────────────────────────────────────────

    @classmethod
    def from_rows(
        cls,
        rows: Sequence[Sequence[float]],
        vertices: Optional[Sequence[Sequence[float]]] = None,
        sigma_scale: Optional[Sequence[float]] = None,
    ) -> "Polytope":
        """Build from rows [a_k..., c_k] and validate."""
        table = np.atleast_2d(np.asarray(rows, dtype=float))
        if table.shape[1] < 2:
            raise InvalidPolytope("facet rows need at least one normal entry and an offset")
        normals = table[:, :-1].copy()
        offsets = table[:, -1].copy()
        n = normals.shape[1]
        norms = np.linalg.norm(normals, axis=1)
        if np.any(norms == 0):
            raise InvalidPolytope("zero facet normal", context=np.flatnonzero(norms == 0).tolist())

        if vertices is None:
            verts = _enumerate_vertices(normals, offsets)
        else:
            verts = np.atleast_2d(np.asarray(vertices, dtype=float)).reshape(-1, n)

        if sigma_scale is None:
            # n = 1: unit point mass at each endpoint
            scale = np.ones_like(offsets) if n == 1 else 1.0 / norms
        else:
            scale = np.asarray(sigma_scale, dtype=float)
            if scale.shape != offsets.shape:
                raise InvalidPolytope("sigma_scale needs one entry per facet")

        poly = cls(normals=normals, offsets=offsets, vertices=verts, sigma_scale=scale)
        poly.validate()
        return poly

    @classmethod
    def box(cls, lows: Sequence[float], highs: Sequence[float]) -> "Polytope":
        lows = np.asarray(lows, dtype=float)
        highs = np.asarray(highs, dtype=float)
        n = lows.size
        rows = []
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            rows.append([*e, lows[i]])
            rows.append([*(-e), -highs[i]])
        return cls.from_rows(rows)

    @classmethod
    def interval(cls, a: float = 0.0, b: float = 1.0) -> "Polytope":
        return cls.box([a], [b])

    @classmethod
    def unit_cube(cls, n: int) -> "Polytope":
        return cls.box([0.0] * n, [1.0] * n)

    # ── Validation ───────────────────────────────────────────────────────

    def validate(self) -> None:
        tol = settings.vertex_tol
        if self.interior_point is None:
            raise InvalidPolytope("polytope has empty interior")
        if self.vertices.shape[0] == 0:
            raise InvalidPolytope("polytope has no vertices (unbounded or degenerate)")

        dist = self.facet_distances(self.vertices)
        scale = 1.0 + np.abs(self.vertices).max()
        if np.any(dist < -tol * scale * 1e3):
            bad = np.flatnonzero((dist < -tol * scale * 1e3).any(axis=1)).tolist()
            raise InvalidPolytope("vertex violates a facet inequality", context=bad)

        # every facet is supporting: min of δ_k over the closed polytope is 0
        unsupported = np.flatnonzero(np.abs(dist.min(axis=0)) > tol * scale * 1e3).tolist()
        if unsupported:
            raise InvalidPolytope("facet does not support the polytope", context=unsupported)

        on_facets = (np.abs(dist) <= tol * scale * 1e3).sum(axis=1)
        loose = np.flatnonzero(on_facets < self.dim).tolist()
        if loose:
            raise InvalidPolytope("vertex lies on fewer than n facets", context=loose)

    # ── Properties ───────────────────────────────────────────────────────

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    @property
    def n_facets(self) -> int:
        return self.normals.shape[0]

    @cached_property
    def normal_norms(self) -> np.ndarray:
        return np.linalg.norm(self.normals, axis=1)

    @cached_property
    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @cached_property
    def interior_point(self) -> Optional[np.ndarray]:
        """Chebyshev centre, or None when the interior is empty."""
        k, n = self.normals.shape
        # maximise r subject to ⟨a_k, ξ⟩ − |a_k| r ≥ c_k
        cost = np.zeros(n + 1)
        cost[-1] = -1.0
        a_ub = np.hstack([-self.normals, self.normal_norms[:, None]])
        res = linprog(cost, A_ub=a_ub, b_ub=-self.offsets,
                      bounds=[(None, None)] * n + [(0, None)], method="highs")
        if res.status != 0 or res.x[-1] <= 0:
            return None
        return res.x[:n]

    @cached_property
    def is_box(self) -> bool:
        return bool(np.all((np.abs(self.normals) > 0).sum(axis=1) == 1))

    # ── Operations ───────────────────────────────────────────────────────

    def facet_distances(self, xi) -> np.ndarray:
        """δ_k(ξ) = ⟨a_k, ξ⟩ − c_k, facet order, for a point or a stack of points."""
        xi = np.asarray(xi, dtype=float)
        return xi @ self.normals.T - self.offsets

    def euclidean_boundary_distance(self, xi):
        xi = np.asarray(xi, dtype=float)
        dist = self.facet_distances(xi)
        outside = dist < -settings.boundary_tol
        if np.any(outside):
            if xi.ndim == 1:
                context = xi.tolist()
            else:
                context = np.flatnonzero(outside.any(axis=-1)).tolist()
            raise PointOutside("point violates a facet inequality", context=context)
        scaled = np.maximum(dist, 0.0) / self.normal_norms
        return scaled.min(axis=-1)

    def contains(self, xi, tol: float = 0.0):
        """Classify points as Interior, Boundary or Outside.

        Returns a Containment for a single point and an array of label
        strings for a stack of points.
        """
        if tol < 0:
            raise ValueError("tol must be nonnegative")
        dist = self.facet_distances(xi)
        lowest = dist.min(axis=-1)
        labels = np.where(
            np.all(dist > tol, axis=-1), Containment.interior.value,
            np.where(np.abs(lowest) <= tol, Containment.boundary.value, Containment.outside.value),
        )
        if np.ndim(labels) == 0:
            return Containment(labels.item())
        return labels

    def facet_vertices(self, k: int, tol: float = 1e-9) -> np.ndarray:
        dist = self.facet_distances(self.vertices)[:, k]
        return self.vertices[np.abs(dist) <= tol * (1.0 + np.abs(self.vertices).max())]

    def facet_frame(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Point on facet k and an orthonormal basis (n, n-1) of its plane."""
        a = self.normals[k]
        origin = a * self.offsets[k] / float(a @ a)
        basis = null_space(a[None, :])
        return origin, basis

    def as_rows(self) -> list[list[float]]:
        return np.hstack([self.normals, self.offsets[:, None]]).tolist()


def _enumerate_vertices(normals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Intersect every n-tuple of facets and keep the feasible points."""
    k, n = normals.shape
    found: list[np.ndarray] = []
    scale = 1.0 + np.abs(offsets).max()
    for combo in itertools.combinations(range(k), n):
        sub = normals[list(combo)]
        if abs(np.linalg.det(sub)) < 1e-14 * np.prod(np.linalg.norm(sub, axis=1)):
            continue
        point = np.linalg.solve(sub, offsets[list(combo)])
        if np.all(normals @ point - offsets >= -1e-10 * scale):
            if not any(np.allclose(point, q, atol=1e-10 * scale) for q in found):
                found.append(point)
    if not found:
        return np.zeros((0, n))
    verts = np.array(found)
    order = np.lexsort(verts.T[::-1])
    logger.debug("Enumerated %d vertices from %d facets", len(verts), k)
    return verts[order]
