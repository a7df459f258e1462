"""SME data, parameters, covariance assembly and the restricted likelihood.

Log-likelihood values omit the ``-(n - p)/2 log(2 pi)`` constant; they are
comparable across parameter values for one dataset, not across datasets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .basis import BasisSpec
from .geometry import as_locations
from .numerics import (CovFactorization, LowRankCov, factorize, factorize_parts,
                       gls_beta, inverse_apply, logdet_chol)

FORMAT_VERSION = 1


class FormatVersionError(ValueError):
    """A serialized fit was written by an incompatible format version."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed locations, design matrix, response and variance weights."""

    locations: np.ndarray
    X: np.ndarray
    y: np.ndarray
    vdelta: Optional[np.ndarray] = None
    veps: Optional[np.ndarray] = None

    def __post_init__(self):
        locs = as_locations(self.locations)
        n = len(locs)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        vd = np.ones(n) if self.vdelta is None else np.asarray(self.vdelta, float).ravel()
        ve = np.ones(n) if self.veps is None else np.asarray(self.veps, float).ravel()
        if not (X.shape[0] == len(y) == len(vd) == len(ve) == n):
            raise ValueError(
                f"inconsistent lengths: locations {n}, X {X.shape[0]}, "
                f"y {len(y)}, vdelta {len(vd)}, veps {len(ve)}")
        if np.any(vd <= 0) or np.any(ve <= 0):
            raise ValueError("variance weights must be strictly positive")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
            raise ValueError("X and y must be finite")
        for name, val in (("locations", locs), ("X", X), ("y", y),
                          ("vdelta", vd), ("veps", ve)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.locations[idx], self.X[idx], self.y[idx],
                       self.vdelta[idx], self.veps[idx])


@dataclass(frozen=True, eq=False)
class SMEParams:
    """``K``, fine-scale variance, known measurement variance, ``beta``, ``b``.

    ``sigma_eps2`` is treated as known: estimation never changes it.
    """

    K: np.ndarray
    sigma_delta2: float
    sigma_eps2: float
    beta: np.ndarray
    b: float

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=float)).copy()
        if K.shape[0] != K.shape[1]:
            raise ValueError("K must be square")
        if self.sigma_delta2 < 0:
            raise ValueError("sigma_delta2 must be >= 0")
        if self.sigma_eps2 < 0:
            raise ValueError("sigma_eps2 must be >= 0")
        if not self.b > 0:
            raise ValueError("b must be positive")
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float)).copy()
        K.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma_delta2", float(self.sigma_delta2))
        object.__setattr__(self, "sigma_eps2", float(self.sigma_eps2))
        object.__setattr__(self, "b", float(self.b))

    def with_(self, **changes) -> "SMEParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "m": int(self.K.shape[0]),
            "K": [float(v) for v in self.K.ravel()],
            "sigma_delta2": self.sigma_delta2,
            "sigma_eps2": self.sigma_eps2,
            "beta": [float(v) for v in self.beta],
            "b": self.b,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SMEParams":
        m = int(d["m"])
        return cls(np.array(d["K"], dtype=float).reshape(m, m),
                   d["sigma_delta2"], d["sigma_eps2"], np.array(d["beta"]), d["b"])

    def __eq__(self, other):
        return (isinstance(other, SMEParams)
                and np.array_equal(self.K, other.K)
                and np.array_equal(self.beta, other.beta)
                and (self.sigma_delta2, self.sigma_eps2, self.b)
                == (other.sigma_delta2, other.sigma_eps2, other.b))


@dataclass
class FitResult:
    """Outcome of an EM/AECM run."""

    params: SMEParams
    loglik_trace: list = field(default_factory=list)  # (iteration, loglik)
    b_trace: list = field(default_factory=list)  # (cycle, b, loglik)
    converged: bool = False
    iterations: int = 0
    method: str = "em"
    evaluations: list = field(default_factory=list)  # candidates per cycle
    ridge_events: int = 0
    phases: list = field(default_factory=list)  # phase name per cycle

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1][1] if self.loglik_trace else float("nan")

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "method": self.method,
            "params": self.params.to_dict(),
            "loglik": self.loglik,
            "converged": bool(self.converged),
            "iterations": self.iterations,
            "ridge_events": self.ridge_events,
            "loglik_trace": [[int(i), float(v)] for i, v in self.loglik_trace],
            "b_trace": [[int(c), float(b), float(v)] for c, b, v in self.b_trace],
            "evaluations": [int(e) for e in self.evaluations],
            "phases": list(self.phases),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        if d.get("format_version") != FORMAT_VERSION:
            raise FormatVersionError(f"unsupported fit format version "
                             f"{d.get('format_version')!r}")
        return cls(SMEParams.from_dict(d["params"]),
                   [tuple(t) for t in d["loglik_trace"]],
                   [tuple(t) for t in d["b_trace"]],
                   bool(d["converged"]), int(d["iterations"]), d["method"],
                   list(d.get("evaluations", [])), int(d.get("ridge_events", 0)),
                   list(d.get("phases", [])))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def basis_matrix(data: Dataset, basis: BasisSpec, b: float) -> np.ndarray:
    """Dense ``n x m`` basis matrix at the observed locations."""
    return basis.matrix(data.locations, b).toarray()


def d_vector(params: SMEParams, data: Dataset) -> np.ndarray:
    return params.sigma_delta2 * data.vdelta + params.sigma_eps2 * data.veps


def assemble_cov(params: SMEParams, data: Dataset, basis: BasisSpec,
                 S=None) -> LowRankCov:
    """``Sigma = S K S' + sigma_delta2 V_delta + sigma_eps2 V_eps``."""
    if S is None:
        S = basis.matrix(data.locations, params.b)
    if S.shape != (data.n, params.K.shape[0]):
        raise ValueError(f"basis matrix is {S.shape}, expected "
                         f"({data.n}, {params.K.shape[0]})")
    return LowRankCov(S, params.K, d_vector(params, data))


@dataclass(frozen=True)
class Evaluation:
    """Quantities shared by the likelihood, the EM step and kriging."""

    params: SMEParams
    f: CovFactorization
    beta: np.ndarray
    C3: np.ndarray
    resid: np.ndarray
    Sir: np.ndarray  # Sigma^-1 (y - X beta)
    SiX: np.ndarray  # Sigma^-1 X
    loglik: float


def evaluate(params: SMEParams, data: Dataset, basis: BasisSpec,
             S=None) -> Evaluation:
    """Factorise ``Sigma``, profile ``beta`` by GLS, and compute the REML value."""
    if S is None or not isinstance(S, np.ndarray):
        f = factorize(assemble_cov(params, data, basis, S))
    else:
        if S.shape != (data.n, params.K.shape[0]):
            raise ValueError(f"basis matrix is {S.shape}, expected "
                             f"({data.n}, {params.K.shape[0]})")
        f = factorize_parts(S, params.K, d_vector(params, data))
    beta, C3 = gls_beta(data.X, data.y, f)
    resid = data.y - data.X @ beta
    Sir = inverse_apply(f, resid)
    SiX = inverse_apply(f, data.X)
    ll = (-0.5 * float(resid @ Sir)
          - 0.5 * float(np.sum(np.log(f.dvec)))
          - logdet_chol(f.C) - logdet_chol(f.C2) - logdet_chol(C3))
    return Evaluation(params.with_(beta=beta), f, beta, C3, resid, Sir, SiX, ll)


def restricted_loglik(params: SMEParams, data: Dataset, basis: BasisSpec,
                      S=None) -> float:
    """Restricted log-likelihood with ``beta`` profiled out by GLS."""
    return evaluate(params, data, basis, S).loglik
