"""Distances and knot layouts.

Locations are handled as ``(n, d)`` float arrays with ``d`` in {1, 2}; a 1-D
sequence of scalars is promoted to a column. For great-circle distances the
two columns are (longitude, latitude) in degrees.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

#: Mean Earth radius by unit (IUGG mean radius R1).
EARTH_RADIUS = {"km": 6371.0088, "mi": 3958.7613}


@dataclass(frozen=True)
class Metric:
    """Distance metric: ``euclidean`` or ``great_circle`` with a sphere radius."""

    kind: str = "euclidean"
    radius: float = EARTH_RADIUS["km"]

    def __post_init__(self):
        if self.kind not in ("euclidean", "great_circle"):
            raise ValueError(f"unknown metric {self.kind!r}")
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    @classmethod
    def parse(cls, text: str) -> "Metric":
        """Parse ``euclidean``, ``greatcircle`` or ``greatcircle:RADIUS``.

        ``RADIUS`` may also be ``km`` or ``mi`` to select the Earth radius.
        """
        name, _, arg = text.strip().lower().partition(":")
        if name == "euclidean":
            if arg:
                raise ValueError("euclidean metric takes no argument")
            return cls("euclidean")
        if name in ("greatcircle", "great_circle"):
            if not arg:
                return cls("great_circle")
            radius = EARTH_RADIUS[arg] if arg in EARTH_RADIUS else float(arg)
            return cls("great_circle", radius)
        raise ValueError(f"unknown metric {text!r}")

    def __str__(self):
        if self.kind == "euclidean":
            return "euclidean"
        return f"greatcircle:{self.radius:g}"


EUCLIDEAN = Metric("euclidean")


def as_locations(x) -> np.ndarray:
    """Return ``x`` as a float ``(n, d)`` array."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr[:, None]
    elif arr.ndim != 2:
        raise ValueError("locations must be a 1-D or 2-D array")
    return arr


def _check_lonlat(arr: np.ndarray) -> None:
    if arr.shape[1] != 2:
        raise ValueError("great-circle distance needs 2-D (lon, lat) coordinates")
    lat = arr[:, 1]
    if np.any(np.abs(lat) > 90):
        raise ValueError("latitude out of range [-90, 90]")


def haversine(a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    """Great-circle distance between paired rows of two lon/lat arrays."""
    lon1, lat1 = np.radians(a[..., 0]), np.radians(a[..., 1])
    lon2, lat2 = np.radians(b[..., 0]), np.radians(b[..., 1])
    h = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    return 2 * radius * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def pairwise_distance(a, b, metric: Metric = EUCLIDEAN) -> np.ndarray:
    """Distance matrix of shape ``(len(a), len(b))``."""
    a, b = as_locations(a), as_locations(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if metric.kind == "great_circle":
        _check_lonlat(a)
        _check_lonlat(b)
        return haversine(a[:, None, :], b[None, :, :], metric.radius)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def to_unit_sphere(lonlat: np.ndarray) -> np.ndarray:
    """Cartesian coordinates on the unit sphere for lon/lat rows."""
    lon, lat = np.radians(lonlat[:, 0]), np.radians(lonlat[:, 1])
    return np.column_stack([np.cos(lat) * np.cos(lon),
                            np.cos(lat) * np.sin(lon),
                            np.sin(lat)])


@dataclass(frozen=True, eq=False)
class KnotLayout:
    """Knots grouped by resolution.

    ``knots`` is ``(m, d)`` and ``res`` holds the 1-based resolution of each
    knot. Knots are kept sorted by resolution (stable), which fixes the column
    order of the basis matrix.
    """

    knots: np.ndarray
    res: np.ndarray

    def __post_init__(self):
        knots = as_locations(self.knots)
        res = np.asarray(self.res, dtype=int).ravel()
        if len(res) != len(knots):
            raise ValueError("one resolution index per knot required")
        if len(res) == 0:
            raise ValueError("empty knot layout")
        if res.min() < 1:
            raise ValueError("resolution indices start at 1")
        order = np.argsort(res, kind="stable")
        object.__setattr__(self, "knots", knots[order])
        object.__setattr__(self, "res", res[order])
        for level in self.levels:
            if np.count_nonzero(self.res == level) < 2:
                raise ValueError(f"resolution {level} has fewer than 2 knots")

    @property
    def m(self) -> int:
        return len(self.res)

    @property
    def dim(self) -> int:
        return self.knots.shape[1]

    @property
    def levels(self) -> list[int]:
        return sorted(set(self.res.tolist()))

    def at(self, level: int) -> np.ndarray:
        return self.knots[self.res == level]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["res"] + [f"coord{j + 1}" for j in range(self.dim)])
            for level, row in zip(self.res, self.knots):
                w.writerow([int(level)] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "KnotLayout":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0].strip() != "res":
            raise ValueError(f"{path}: expected header 'res,coord1[,coord2]'")
        res, coords = [], []
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            try:
                res.append(int(row[0]))
                coords.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
        return cls(np.array(coords), np.array(res))

    def __eq__(self, other):
        return (isinstance(other, KnotLayout)
                and np.array_equal(self.res, other.res)
                and np.array_equal(self.knots, other.knots))


def min_interknot_distance(layout: KnotLayout, level: int,
                           metric: Metric = EUCLIDEAN) -> float:
    """Smallest distance between two distinct knots of one resolution."""
    pts = layout.at(level)
    if len(pts) < 2:
        raise ValueError(f"resolution {level} has fewer than 2 knots")
    d = pairwise_distance(pts, pts, metric)
    d[np.diag_indices_from(d)] = np.inf
    dmin = float(d.min())
    if dmin <= 0:
        raise ValueError(f"duplicate knots at resolution {level}")
    return dmin


def _regular_1d(lo: float, hi: float, count: int, discrete: bool) -> np.ndarray:
    if discrete:
        # integer sites lo..hi are unit cells [lo - 1/2, hi + 1/2]
        lo, hi = lo - 0.5, hi + 0.5
    return lo + (hi - lo) * np.arange(count) / (count - 1)


def triangular_shape(width: float, height: float, count: int) -> tuple[int, int]:
    """Columns and rows of a triangular lattice with about ``count`` points."""
    h = np.sqrt(2 * width * height / (np.sqrt(3) * count))
    best = None
    for nx in range(2, count // 2 + 1):
        for ny in (max(2, int(count / nx)), max(2, int(np.ceil(count / nx)))):
            # score: count mismatch first, then how far spacing is from equilateral
            hx = width / max(nx - 0.5, 1)
            hy = height / (ny - 1) / (np.sqrt(3) / 2)
            score = (abs(nx * ny - count), abs(np.log(hx / hy)))
            if best is None or score < best[0]:
                best = (score, nx, ny)
    if best is None or h <= 0:
        raise ValueError("cannot fit a triangular lattice")
    return best[1], best[2]


def _triangular_2d(bounds, shape) -> np.ndarray:
    (xlo, xhi), (ylo, yhi) = bounds
    nx, ny = shape
    if nx < 2 or ny < 2:
        raise ValueError("triangular grid needs at least 2 columns and 2 rows")
    w, hgt = xhi - xlo, yhi - ylo
    hx = w / (nx - 0.5)
    hy = hgt / ((ny - 1) * np.sqrt(3) / 2)
    h = min(hx, hy)
    dy = h * np.sqrt(3) / 2
    x0 = xlo + (w - (nx - 0.5) * h) / 2
    y0 = ylo + (hgt - (ny - 1) * dy) / 2
    pts = []
    for r in range(ny):
        offset = h / 2 if r % 2 else 0.0
        for c in range(nx):
            pts.append((x0 + offset + c * h, y0 + r * dy))
    return np.array(pts)


def place_knots(bounds, counts: Sequence, scheme: str = "regular_1d",
                discrete: bool = False) -> KnotLayout:
    """Evenly spaced knots, one block per resolution.

    Parameters
    ----------
    bounds : ``(lo, hi)`` for ``regular_1d``; ``((xlo, xhi), (ylo, yhi))``
        for ``regular_triangular_2d``.
    counts : per-resolution knot counts. For the triangular scheme an entry may
        also be an explicit ``(nx, ny)`` lattice shape.
    discrete : treat 1-D bounds as the integer sites ``lo..hi`` (unit cells), so
        ``(1, 256)`` with 5 knots gives ``0.5, 64.5, ..., 256.5``.
    """
    if len(counts) == 0:
        raise ValueError("at least one resolution required")
    knots, res = [], []
    if scheme == "regular_1d":
        lo, hi = map(float, bounds)
        if not hi > lo:
            raise ValueError("empty domain")
        for level, count in enumerate(counts, start=1):
            if int(count) < 2:
                raise ValueError("need at least 2 knots per resolution")
            pts = _regular_1d(lo, hi, int(count), discrete)
            knots.append(pts[:, None])
            res.append(np.full(len(pts), level))
    elif scheme == "regular_triangular_2d":
        (xlo, xhi), (ylo, yhi) = [tuple(map(float, b)) for b in bounds]
        if not (xhi > xlo and yhi > ylo):
            raise ValueError("empty domain")
        for level, count in enumerate(counts, start=1):
            if isinstance(count, (tuple, list)):
                shape = tuple(int(c) for c in count)
            else:
                if int(count) < 4:
                    raise ValueError("triangular grid needs at least 4 knots")
                shape = triangular_shape(xhi - xlo, yhi - ylo, int(count))
            pts = _triangular_2d(((xlo, xhi), (ylo, yhi)), shape)
            knots.append(pts)
            res.append(np.full(len(pts), level))
    else:
        raise ValueError(f"unknown knot scheme {scheme!r}")
    return KnotLayout(np.vstack(knots), np.concatenate(res))


def read_knots(path: str | Path) -> KnotLayout:
    return KnotLayout.from_csv(path)
