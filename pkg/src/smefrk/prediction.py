"""Fixed-rank kriging predictions and standard errors."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from .basis import BasisSpec
from .geometry import as_locations
from .model import Dataset, SMEParams, evaluate
from .numerics import diag_inverse, inverse_apply, tri_solve

log = logging.getLogger(__name__)


def match_overlap(targets, observed, snap: float = 0.0) -> np.ndarray:
    """Index of the observed location equal to each target, or -1.

    With ``snap > 0`` the nearest observed location within ``snap`` (same
    coordinate units) counts as equal.
    """
    targets, observed = as_locations(targets), as_locations(observed)
    if snap > 0:
        dist, idx = cKDTree(observed).query(targets, distance_upper_bound=snap)
        return np.where(np.isfinite(dist), idx, -1).astype(int)
    lookup = {}
    for j, row in enumerate(map(tuple, observed)):
        lookup.setdefault(row, j)
    return np.array([lookup.get(tuple(row), -1) for row in targets], dtype=int)


@dataclass(frozen=True, eq=False)
class PredictionRequest:
    """Targets, their design matrix and fine-scale weights.

    ``overlap[i]`` is the observed index sharing target ``i``'s coordinates,
    or -1. When omitted it is found by exact coordinate equality. A given map
    may pair coordinates up to ``snap`` apart.
    """

    targets: np.ndarray
    X0: np.ndarray
    vdelta0: np.ndarray | None = None
    overlap: np.ndarray | None = None
    snap: float = 0.0

    def __post_init__(self):
        t = as_locations(self.targets)
        X0 = np.asarray(self.X0, dtype=float)
        if X0.ndim == 1:
            X0 = X0[:, None]
        vd = np.ones(len(t)) if self.vdelta0 is None else np.asarray(self.vdelta0, float).ravel()
        if not (len(t) == len(X0) == len(vd)):
            raise ValueError("targets, X0 and vdelta0 lengths differ")
        if np.any(vd <= 0):
            raise ValueError("vdelta0 must be positive")
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "X0", X0)
        object.__setattr__(self, "vdelta0", vd)
        if self.overlap is not None:
            ov = np.asarray(self.overlap, dtype=int).ravel()
            if len(ov) != len(t):
                raise ValueError("overlap length differs from targets")
            object.__setattr__(self, "overlap", ov)

    @property
    def N(self) -> int:
        return len(self.targets)

    def resolve_overlap(self, data: Dataset, check: bool = True) -> np.ndarray:
        if self.overlap is None:
            return match_overlap(self.targets, data.locations)
        ov = self.overlap
        if check:
            bad = (ov >= data.n) | (ov < -1)
            if np.any(bad):
                raise ValueError("overlap references an invalid observed index")
            hit = ov >= 0
            gap = np.linalg.norm(data.locations[ov[hit]] - self.targets[hit], axis=1)
            if np.any(gap > self.snap):
                raise ValueError("overlap map inconsistent with coordinates")
        return ov

    @classmethod
    def from_sites(cls, sites, X0, data: Dataset, vdelta0=None, snap: float = 0.0):
        ov = match_overlap(sites, data.locations, snap) if snap > 0 else None
        return cls(sites, X0, vdelta0, ov, snap)


@dataclass
class KrigingOutput:
    yhat: np.ndarray
    kse: np.ndarray
    mean: np.ndarray  # X0 beta
    spatial: np.ndarray  # C(s0) Sigma^-1 (y - X beta)
    clamped: int = 0  # negative variances set to zero


class Kriger:
    """Precomputed pieces of a fitted model for repeated prediction."""

    def __init__(self, params: SMEParams, data: Dataset, basis: BasisSpec, S=None):
        if S is None:
            S = basis.matrix(data.locations, params.b)
        ev = evaluate(params, data, basis, S)
        f = ev.f
        self.params, self.data, self.basis = ev.params, data, basis
        self.beta, self.C3 = ev.beta, ev.C3
        self.Sir, self.SiX = ev.Sir, ev.SiX
        self.Q = inverse_apply(f, f.S)  # Sigma^-1 S
        self.M = f.S.T @ self.Q
        self.SX = data.X.T @ self.Q
        self.u = f.S.T @ ev.Sir
        self.dinv = diag_inverse(f)
        K = self.params.K
        self.KMK = K @ self.M @ K

    def _batch(self, targets, X0, vd0, ov):
        p = self.params
        K, s2 = p.K, p.sigma_delta2
        A = self.basis.matrix(targets, p.b).toarray()
        AK = A @ K
        hit = ov >= 0
        j = ov[hit]
        w = np.zeros(len(targets))
        w[hit] = s2 * vd0[hit]  # sigma_delta2 v_delta(s0) where s0 is observed

        mean = X0 @ self.beta
        spatial = AK @ self.u
        spatial[hit] += w[hit] * self.Sir[j]

        prior = np.einsum("ij,ij->i", AK, A) + s2 * vd0
        csic = np.einsum("ij,ij->i", A @ self.KMK, A)
        csic[hit] += (2 * w[hit] * np.einsum("ij,ij->i", AK[hit], self.Q[j])
                      + w[hit] ** 2 * self.dinv[j])
        G = X0 - AK @ self.SX.T
        G[hit] -= w[hit][:, None] * self.SiX[j]
        Z = tri_solve(self.C3, np.ascontiguousarray(G.T))
        var = prior - csic + np.einsum("ij,ij->j", Z, Z)
        return mean, spatial, var

    def predict(self, request: PredictionRequest, batch_size: int = 4096) -> KrigingOutput:
        if request.X0.shape[1] != self.data.p:
            raise ValueError(f"X0 has {request.X0.shape[1]} columns, "
                             f"model has {self.data.p}")
        ov = request.resolve_overlap(self.data)
        N = request.N
        mean, spatial, var = np.empty(N), np.empty(N), np.empty(N)
        for start in range(0, N, batch_size):
            sl = slice(start, min(start + batch_size, N))
            mean[sl], spatial[sl], var[sl] = self._batch(
                request.targets[sl], request.X0[sl], request.vdelta0[sl], ov[sl])
        neg = var < 0
        clamped = int(np.count_nonzero(neg))
        if clamped:
            log.warning("%d negative kriging variances clamped to zero", clamped)
            var[neg] = 0.0
        return KrigingOutput(mean + spatial, np.sqrt(var), mean, spatial, clamped)


def predict(params: SMEParams, data: Dataset, basis: BasisSpec,
            request: PredictionRequest, batch_size: int = 4096, S=None) -> KrigingOutput:
    """Kriging predictions and standard errors at ``request.targets``."""
    return Kriger(params, data, basis, S).predict(request, batch_size)


def krige(params, data, basis, request, **kw) -> np.ndarray:
    return predict(params, data, basis, request, **kw).yhat


def kriging_se(params, data, basis, request, **kw) -> np.ndarray:
    return predict(params, data, basis, request, **kw).kse


def cross_cov(params: SMEParams, data: Dataset, basis: BasisSpec,
              request: PredictionRequest):
    """``C(s0) = A K S' + sigma_delta2 v_delta(s0) I_s`` as a pair of factors.

    Returns ``(AK, S, overlap, weights)`` so that
    ``C = AK @ S.T`` plus ``weights[i]`` at ``(i, overlap[i])``; use
    :func:`dense_cross_cov` to materialise small cases.
    """
    ov = request.resolve_overlap(data)
    A = basis.matrix(request.targets, params.b).toarray()
    S = basis.matrix(data.locations, params.b).toarray()
    w = np.where(ov >= 0, params.sigma_delta2 * request.vdelta0, 0.0)
    return A @ params.K, S, ov, w


def dense_cross_cov(params, data, basis, request) -> np.ndarray:
    AK, S, ov, w = cross_cov(params, data, basis, request)
    C = AK @ S.T
    hit = ov >= 0
    C[np.nonzero(hit)[0], ov[hit]] += w[hit]
    return C


def prediction_interval(output: KrigingOutput, level: float = 0.95):
    """Normal prediction interval ``yhat -/+ z * kse``."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    z = stats.norm.ppf(0.5 * (1 + level))
    return output.yhat - z * output.kse, output.yhat + z * output.kse
