"""Diagonal-plus-low-rank covariance algebra.

Everything here works with ``Sigma = S K S' + D`` (``D`` diagonal) through
``m x m`` Cholesky factors, so the cost is ``O(n m^2)`` and no ``n x n``
array is ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg.lapack import dpotrf, dpotrs, dtrtrs

#: Right-hand sides at least this wide (and as wide as ``n``) are refused.
DENSE_LIMIT = 20_000


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Cholesky failed; ``pivot`` is the 1-based order of the failing minor."""

    def __init__(self, what: str, pivot: int):
        super().__init__(f"{what} is not positive definite "
                         f"(leading minor of order {pivot})")
        self.what = what
        self.pivot = pivot


def cholesky(A: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor; raises :class:`NotPositiveDefinite`."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{what} must be square")
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefinite(what, 1)
    L, info = dpotrf(A, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise NotPositiveDefinite(what, int(info))
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return L


def cho_solve_lower(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``(L L') X = B`` by two triangular solves."""
    X, info = dpotrs(L, B, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs: illegal argument {-info}")
    return X


def tri_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``L X = B`` for lower-triangular ``L``."""
    X, info = dtrtrs(L, B, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"dtrtrs failed (info={info})")
    return X


def logdet_chol(L: np.ndarray) -> float:
    """``log|L|`` of a triangular factor (so ``log|A| = 2 * logdet_chol``)."""
    return float(np.sum(np.log(np.diag(L))))


def _dense(S) -> np.ndarray:
    return S.toarray() if sparse.issparse(S) else np.asarray(S, dtype=float)


@dataclass(frozen=True)
class LowRankCov:
    """``Sigma = S K S' + diag(dvec)``."""

    S: object
    K: np.ndarray
    dvec: np.ndarray

    def __post_init__(self):
        S = self.S if sparse.issparse(self.S) else np.atleast_2d(
            np.asarray(self.S, dtype=float))
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        dvec = np.atleast_1d(np.asarray(self.dvec, dtype=float))
        if K.shape != (S.shape[1], S.shape[1]):
            raise ValueError(f"K is {K.shape} but S has {S.shape[1]} columns")
        if dvec.shape != (S.shape[0],):
            raise ValueError("dvec length must match rows of S")
        if not np.all(dvec > 0):
            raise ValueError("diagonal D must be strictly positive")
        if not np.allclose(K, K.T, rtol=1e-10, atol=1e-12 * np.abs(K).max()):
            raise ValueError("K must be symmetric")
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "dvec", dvec)

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def m(self) -> int:
        return self.S.shape[1]

    def dense(self) -> np.ndarray:
        """Assemble the full ``n x n`` matrix (tests and tiny problems only)."""
        S = _dense(self.S)
        return S @ self.K @ S.T + np.diag(self.dvec)


@dataclass(frozen=True)
class CovFactorization:
    """Cholesky factors of ``K`` and ``K^-1 + S' D^-1 S`` plus ``D^-1 S``."""

    S: np.ndarray
    dvec: np.ndarray
    K: np.ndarray
    C: np.ndarray
    C2: np.ndarray
    DinvS: np.ndarray

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def m(self) -> int:
        return self.S.shape[1]


def factorize(cov: LowRankCov) -> CovFactorization:
    return factorize_parts(_dense(cov.S), cov.K, cov.dvec)


def factorize_parts(S: np.ndarray, K: np.ndarray, dvec: np.ndarray) -> CovFactorization:
    """:func:`factorize` without input validation (dense ``S``)."""
    C = cholesky(K, "K")
    Kinv = cho_solve_lower(C, np.eye(len(K)))
    DinvS = S / dvec[:, None]
    inner = Kinv + S.T @ DinvS
    C2 = cholesky(0.5 * (inner + inner.T), "K^-1 + S'D^-1 S")
    return CovFactorization(S, dvec, K, C, C2, DinvS)


def inverse_apply(f: CovFactorization, rhs) -> np.ndarray:
    """``Sigma^-1 @ rhs`` by the Woodbury identity."""
    rhs = np.asarray(rhs, dtype=float)
    vec = rhs.ndim == 1
    R = rhs[:, None] if vec else rhs
    if R.shape[0] != f.n:
        raise ValueError(f"rhs has {R.shape[0]} rows, expected {f.n}")
    if R.shape[1] >= f.n > DENSE_LIMIT:
        raise ValueError("refusing to form an n x n result")
    R1 = R / f.dvec[:, None]
    Z = cho_solve_lower(f.C2, f.S.T @ R1)
    out = R1 - f.DinvS @ Z
    return out[:, 0] if vec else out


def logdet(f: CovFactorization) -> float:
    """``log|Sigma| = log|D| + 2 log|C| + 2 log|C2|``."""
    return (float(np.sum(np.log(f.dvec)))
            + 2 * logdet_chol(f.C) + 2 * logdet_chol(f.C2))


def diag_inverse(f: CovFactorization) -> np.ndarray:
    """Diagonal of ``Sigma^-1`` in ``O(n m^2)``."""
    W = tri_solve(f.C2, f.DinvS.T)
    return 1.0 / f.dvec - np.einsum("ij,ij->j", W, W)


def gls_beta(X, y, f: CovFactorization):
    """Generalised least squares coefficients.

    Returns ``(beta, C3)`` where ``C3`` is the lower Cholesky factor of
    ``X' Sigma^-1 X``. A rank-deficient ``X`` raises
    :class:`NotPositiveDefinite` naming the failing pivot.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    SiX = inverse_apply(f, X)
    C3 = cholesky(0.5 * (X.T @ SiX + SiX.T @ X), "X' Sigma^-1 X")
    beta = cho_solve_lower(C3, SiX.T @ y)
    # guard against numerically singular cross products that dpotrf accepts
    if np.min(np.diag(C3)) <= 1e-12 * np.max(np.diag(C3)):
        raise NotPositiveDefinite("X' Sigma^-1 X", int(np.argmin(np.diag(C3))) + 1)
    return beta, C3
