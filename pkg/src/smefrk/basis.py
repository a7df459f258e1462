"""Multi-resolution local bisquare basis functions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .geometry import (EUCLIDEAN, KnotLayout, Metric, as_locations, haversine,
                       min_interknot_distance, to_unit_sphere)


def bisquare(d):
    """Local bisquare ``(1 - d^2)^2`` on ``[0, 1]``, zero beyond."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("bisquare argument must be nonnegative")
    return np.where(d <= 1.0, (1.0 - d * d) ** 2, 0.0)


def bandwidth(layout: KnotLayout, level: int, b: float,
              metric: Metric = EUCLIDEAN) -> float:
    """Support radius ``b * min inter-knot distance`` at one resolution."""
    if not b > 0:
        raise ValueError("bandwidth constant b must be positive")
    return b * min_interknot_distance(layout, level, metric)


@dataclass(frozen=True)
class BasisSpec:
    """Knot layout and metric; together with ``b`` this fixes the basis."""

    layout: KnotLayout
    metric: Metric = EUCLIDEAN

    def __post_init__(self):
        # min distances do not depend on b; cache them once
        mins = {l: min_interknot_distance(self.layout, l, self.metric)
                for l in self.layout.levels}
        object.__setattr__(self, "_mins", mins)

    @property
    def m(self) -> int:
        return self.layout.m

    def radii(self, b: float) -> np.ndarray:
        """Per-knot support radius for bandwidth constant ``b``."""
        if not b > 0:
            raise ValueError("bandwidth constant b must be positive")
        return np.array([b * self._mins[l] for l in self.layout.res])

    def matrix(self, locations, b: float) -> sparse.csr_matrix:
        return build_basis_matrix(locations, self, b)


def _neighbour_pairs(locs, knots, rmax, metric):
    """Candidate (location, knot, distance) triples with distance <= rmax."""
    if metric.kind == "great_circle":
        # chord on the unit sphere is monotone in arc length
        angle = min(rmax / metric.radius, np.pi)
        chord = 2 * np.sin(angle / 2) * (1 + 1e-12) + 1e-15
        t_loc = cKDTree(to_unit_sphere(locs))
        t_knot = cKDTree(to_unit_sphere(knots))
        pairs = t_loc.sparse_distance_matrix(t_knot, chord, output_type="ndarray")
        i, j = pairs["i"], pairs["j"]
        d = haversine(locs[i], knots[j], metric.radius)
    else:
        t_loc, t_knot = cKDTree(locs), cKDTree(knots)
        pairs = t_loc.sparse_distance_matrix(t_knot, rmax, output_type="ndarray")
        i, j, d = pairs["i"], pairs["j"], pairs["v"]
    return i, j, d


def build_basis_matrix(locations, spec: BasisSpec, b: float) -> sparse.csr_matrix:
    """Sparse ``n x m`` matrix of bisquare evaluations.

    Entry ``(i, k)`` is ``bisquare(dist(s_i, u_k) / r_k)``; pairs farther apart
    than the knot's radius are never materialised.
    """
    locs = as_locations(locations)
    if len(locs) == 0:
        raise ValueError("no locations")
    knots = spec.layout.knots
    if locs.shape[1] != knots.shape[1]:
        raise ValueError(f"locations are {locs.shape[1]}-D but knots are "
                         f"{knots.shape[1]}-D")
    if spec.metric.kind == "great_circle" and np.any(np.abs(locs[:, 1]) > 90):
        raise ValueError("latitude out of range [-90, 90]")
    radii = spec.radii(b)
    i, j, d = _neighbour_pairs(locs, knots, radii.max(), spec.metric)
    vals = bisquare(d / radii[j])
    keep = vals > 0
    S = sparse.csr_matrix((vals[keep], (i[keep], j[keep])),
                          shape=(len(locs), spec.m))
    S.sum_duplicates()
    return S


def dump_coo(S, path) -> None:
    """Write a basis matrix as ``row,col,value`` lines."""
    coo = sparse.coo_matrix(S)
    with open(path, "w") as fh:
        fh.write("row,col,value\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r},{c},{float(v)!r}\n")
