"""Synthetic SME fields on a 1-D lattice, evaluation metrics and the
Monte Carlo study driver."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special, stats

from .basis import BasisSpec
from .estimation import AecmConfig, EmConfig, EstimationError, aecm_fit, em_fit, initial_params
from .geometry import KnotLayout, as_locations, pairwise_distance, place_knots
from .model import Dataset, SMEParams, basis_matrix, d_vector, evaluate
from .numerics import (LowRankCov, NotPositiveDefinite, diag_inverse,
                       factorize, inverse_apply, logdet)
from .prediction import PredictionRequest, predict, prediction_interval

log = logging.getLogger(__name__)

DOMAIN = (1, 256)
LATTICE_KNOTS = (0.5, 64.5, 128.5, 192.5, 256.5)
BETA = (5.0, 0.08)
MATERN = dict(rho=9.0, theta=96.0, nu=1.0)
K_TYPES = ("matern", "wishart_positive", "wishart")
SIGMA_DELTA2 = (0.01, 0.1, 1.0)
SIGMA_EPS2 = (1.0, 10.0, 100.0)
TRUE_B = (0.5, 1.0, 1.5, 2.0)
DESIGNS = ("clustered", "random")


def lattice_layout() -> KnotLayout:
    return place_knots(DOMAIN, [5], "regular_1d", discrete=True)


# ---------------------------------------------------------------------------
# Covariance generators
# ---------------------------------------------------------------------------

def matern_cov(d, rho: float, theta: float, nu: float):
    """Matern covariance; ``d = 0`` gives the sill ``rho``."""
    if not (theta > 0 and nu > 0) or rho < 0:
        raise ValueError("need theta > 0, nu > 0, rho >= 0")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    x = d / theta
    with np.errstate(invalid="ignore", divide="ignore"):
        out = rho / (2 ** (nu - 1) * special.gamma(nu)) * x ** nu * special.kv(nu, x)
    out = np.where(x == 0, rho, out)
    # kv underflows to 0 far out; keep exact zeros rather than nan
    out = np.where(np.isfinite(out), out, 0.0)
    return out if out.ndim else float(out)


def wishart_bartlett(scale: np.ndarray, df: int, rng: np.random.Generator) -> np.ndarray:
    """One Wishart draw by the Bartlett decomposition; ``E[W] = df * scale``."""
    scale = np.asarray(scale, dtype=float)
    p = scale.shape[0]
    if df < p:
        raise ValueError("degrees of freedom must be >= dimension")
    L = np.linalg.cholesky(scale)
    A = np.zeros((p, p))
    for i in range(p):
        A[i, i] = np.sqrt(rng.chisquare(df - i))
        A[i, :i] = rng.standard_normal(i)
    LA = L @ A
    return LA @ LA.T


def nearest_nonneg_spd(A: np.ndarray, floor: float = 1e-10):
    """Shift the diagonal of a symmetric nonnegative matrix until it is PD.

    Returns ``(matrix, shifted)``. A diagonal shift keeps every entry
    nonnegative, which eigenvalue clipping would not.
    """
    A = 0.5 * (A + A.T)
    lam = np.linalg.eigvalsh(A)[0]
    if lam > floor * max(1.0, abs(A).max()):
        return A, False
    return A + (floor * max(1.0, abs(A).max()) - lam) * np.eye(len(A)), True


def sample_K(kind: str, rng: np.random.Generator, knots=LATTICE_KNOTS) -> np.ndarray:
    """Knot covariance for one of the study's three structures."""
    u = as_locations(knots)
    m = len(u)
    if kind == "matern":
        return matern_cov(pairwise_distance(u, u), **MATERN)
    if kind not in ("wishart", "wishart_positive"):
        raise ValueError(f"unknown K type {kind!r}")
    W = wishart_bartlett(2.0 * np.eye(m), 10, rng)
    scale = np.diag(np.arange(1.0, m + 1.0))
    K = scale @ W @ scale
    if kind == "wishart_positive":
        K, _ = nearest_nonneg_spd(np.abs(K))
    return 0.5 * (K + K.T)


# ---------------------------------------------------------------------------
# Designs and fields
# ---------------------------------------------------------------------------

def clustered_pool(domain=DOMAIN, width: int = 32) -> np.ndarray:
    """Sites in every other block of ``width`` consecutive sites, from the first."""
    sites = np.arange(domain[0], domain[1] + 1)
    return sites[((sites - domain[0]) // width) % 2 == 0]


def sample_design(domain, n: int, kind: str, rng: np.random.Generator) -> np.ndarray:
    """Sorted observed sites drawn without replacement."""
    if kind == "random":
        pool = np.arange(domain[0], domain[1] + 1)
    elif kind == "clustered":
        pool = clustered_pool(domain)
    else:
        raise ValueError(f"unknown design {kind!r}")
    if n > len(pool):
        raise ValueError(f"n={n} exceeds the {len(pool)} available sites")
    return np.sort(rng.choice(pool, size=n, replace=False))


@dataclass(frozen=True)
class SimDesign:
    """One cell of the simulation grid."""

    K_type: str = "matern"
    sigma_delta2: float = 0.1
    sigma_eps2: float = 1.0
    b: float = 1.5
    design: str = "random"
    n: int = 64
    domain: tuple = DOMAIN
    beta: tuple = BETA

    def __post_init__(self):
        if self.n > self.domain[1] - self.domain[0] + 1:
            raise ValueError("n exceeds the domain size")
        if self.K_type not in K_TYPES:
            raise ValueError(f"unknown K type {self.K_type!r}")
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}")

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.domain[0], self.domain[1] + 1, dtype=float)

    def design_matrix(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return np.column_stack([np.ones_like(s), s])


@dataclass
class SimulatedField:
    data: Dataset  # observed subset
    observed: np.ndarray  # indices into the full lattice
    truth: np.ndarray  # y - eps over the full lattice
    y_full: np.ndarray
    sites: np.ndarray
    X_full: np.ndarray
    params: SMEParams  # generating parameters


def simulate_field(design: SimDesign, K: np.ndarray, rng: np.random.Generator,
                   basis: BasisSpec | None = None,
                   eta: np.ndarray | None = None) -> SimulatedField:
    """Draw ``y = X beta + S eta + delta + eps`` over the whole lattice and
    keep ``design.n`` sites. ``eta`` may be forced (e.g. zeros)."""
    basis = basis or BasisSpec(lattice_layout())
    sites = design.sites
    X = design.design_matrix(sites)
    S = basis.matrix(sites, design.b).toarray()
    m = basis.m
    if eta is None:
        eta = np.linalg.cholesky(K) @ rng.standard_normal(m)
    N = len(sites)
    delta = math.sqrt(design.sigma_delta2) * rng.standard_normal(N)
    eps = math.sqrt(design.sigma_eps2) * rng.standard_normal(N)
    truth = X @ np.asarray(design.beta) + S @ eta + delta
    y = truth + eps
    obs = sample_design(design.domain, design.n, design.design, rng) - design.domain[0]
    data = Dataset(sites[obs], X[obs], y[obs])
    params = SMEParams(K, design.sigma_delta2, design.sigma_eps2,
                       np.asarray(design.beta), design.b)
    return SimulatedField(data, obs, truth, y, sites, X, params)


def variance_ratios(design: SimDesign, K: np.ndarray,
                    basis: BasisSpec | None = None) -> tuple[float, float]:
    """Signal-to-noise ratio and fine-scale proportion over the lattice."""
    basis = basis or BasisSpec(lattice_layout())
    S = basis.matrix(design.sites, design.b).toarray()
    N = len(S)
    tr_sks = float(np.einsum("ij,jk,ik->", S, K, S))
    tr_d = design.sigma_delta2 * N
    return (tr_sks + tr_d) / (design.sigma_eps2 * N), tr_d / (tr_sks + tr_d)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def mspe(yhat, truth) -> float:
    yhat, truth = np.asarray(yhat, float), np.asarray(truth, float)
    if yhat.shape != truth.shape:
        raise ValueError("length mismatch")
    if yhat.size == 0:
        raise ValueError("empty input")
    return float(np.mean((yhat - truth) ** 2))


def rkse(kse_est, kse_true) -> float:
    """Median estimated KSE over median true-parameter KSE."""
    den = float(np.median(kse_true))
    if den <= 0:
        raise ValueError("median true KSE is zero")
    return float(np.median(kse_est)) / den


def pic(intervals, truth) -> float:
    """Fraction of intervals ``(lo, hi)`` containing the truth."""
    lo, hi = intervals
    truth = np.asarray(truth, float)
    if truth.size == 0:
        raise ValueError("empty input")
    return float(np.mean((lo <= truth) & (truth <= hi)))


def kl_divergence(mu_p, cov_p: LowRankCov, mu_q, cov_q: LowRankCov) -> float:
    """``KL(P || Q)`` for Gaussians with diagonal-plus-low-rank covariances."""
    if cov_p.n != cov_q.n:
        raise ValueError("covariances must have the same dimension")
    fp, fq = factorize(cov_p), factorize(cov_q)
    n = cov_p.n
    # tr(Q^-1 P) = sum_i [Q^-1]_ii d_P,i + tr(L' S_P' Q^-1 S_P L)
    SL = fp.S @ fp.C
    tr = float(diag_inverse(fq) @ fp.dvec + np.sum(SL * inverse_apply(fq, SL)))
    diff = np.asarray(mu_q, float) - np.asarray(mu_p, float)
    quad = float(diff @ inverse_apply(fq, diff))
    return 0.5 * (tr + quad - n + logdet(fq) - logdet(fp))


def inverse_distance_weights(locations, row_standardize: bool = True) -> np.ndarray:
    locs = as_locations(locations)
    d = pairwise_distance(locs, locs)
    with np.errstate(divide="ignore"):
        w = np.where(d > 0, 1.0 / d, 0.0)
    np.fill_diagonal(w, 0.0)
    if row_standardize:
        rs = w.sum(axis=1, keepdims=True)
        w = np.divide(w, rs, out=np.zeros_like(w), where=rs > 0)
    return w


def morans_i(values, locations=None, weights=None,
             alternative: str = "two-sided") -> tuple[float, float]:
    """Moran's I and its p-value (normal approximation under randomisation).

    Default weights are row-standardised inverse distances.
    """
    z = np.asarray(values, dtype=float).ravel()
    n = len(z)
    if n < 4:
        raise ValueError("Moran's I needs at least 4 values")
    if weights is None:
        if locations is None:
            raise ValueError("give locations or weights")
        weights = inverse_distance_weights(locations)
    W = np.asarray(weights, dtype=float)
    z = z - z.mean()
    m2 = float(z @ z)
    if m2 <= 0:
        raise ValueError("residuals have zero variance")
    S0 = W.sum()
    I = n / S0 * float(z @ W @ z) / m2
    EI = -1.0 / (n - 1)
    S1 = 0.5 * np.sum((W + W.T) ** 2)
    S2 = np.sum((W.sum(axis=0) + W.sum(axis=1)) ** 2)
    b2 = n * np.sum(z ** 4) / m2 ** 2
    num = (n * ((n * n - 3 * n + 3) * S1 - n * S2 + 3 * S0 ** 2)
           - b2 * ((n * n - n) * S1 - 2 * n * S2 + 6 * S0 ** 2))
    var = num / ((n - 1) * (n - 2) * (n - 3) * S0 ** 2) - EI ** 2
    zscore = (I - EI) / math.sqrt(var)
    if alternative == "two-sided":
        p = 2 * stats.norm.sf(abs(zscore))
    elif alternative == "greater":
        p = stats.norm.sf(zscore)
    elif alternative == "less":
        p = stats.norm.cdf(zscore)
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    return float(I), float(p)


# ---------------------------------------------------------------------------
# Study driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudyConfig:
    replicates: int = 200
    seed: int = 2020
    em: EmConfig = field(default_factory=EmConfig)
    aecm: AecmConfig = field(default_factory=AecmConfig)
    em_b: float = 1.5
    level: float = 0.95
    methods: tuple = ("true", "aecm", "em")
    mspe_sites: str = "unobserved"  # lattice sites scored by MSPE
    coverage_sites: str = "all"  # lattice sites scored by PIC and rKSE

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        for v in (self.mspe_sites, self.coverage_sites):
            if v not in ("unobserved", "all"):
                raise ValueError("site sets must be 'unobserved' or 'all'")


def design_grid(K_types=K_TYPES, sigma_eps2=SIGMA_EPS2, b=TRUE_B,
                sigma_delta2=SIGMA_DELTA2, designs=DESIGNS) -> list[SimDesign]:
    return [SimDesign(k, sd, se, bb, d)
            for k, se, bb, sd, d in itertools.product(K_types, sigma_eps2, b,
                                                      sigma_delta2, designs)]


def replicate_rng(seed: int, design: SimDesign, rep: int) -> np.random.Generator:
    """Generator keyed by (seed, cell, replicate), independent of run order."""
    key = [seed, K_TYPES.index(design.K_type), int(round(design.sigma_delta2 * 1000)),
           int(round(design.sigma_eps2 * 1000)), int(round(design.b * 1000)),
           DESIGNS.index(design.design), design.n, rep]
    return np.random.default_rng(np.random.SeedSequence(key))


def _site_mask(fld, which: str) -> np.ndarray:
    mask = np.ones(len(fld.sites), bool)
    if which == "unobserved":
        mask[fld.observed] = False
    return mask


def _predict_metrics(params, fld, basis, cfg):
    req = PredictionRequest.from_sites(fld.sites, fld.X_full, fld.data)
    out = predict(params, fld.data, basis, req)
    lo, hi = prediction_interval(out, cfg.level)
    m, c = _site_mask(fld, cfg.mspe_sites), _site_mask(fld, cfg.coverage_sites)
    return out.kse[c], {
        "mspe": mspe(out.yhat[m], fld.truth[m]),
        "pic": pic((lo[c], hi[c]), fld.truth[c]),
    }


def _model_cov(params: SMEParams, data: Dataset, basis: BasisSpec) -> LowRankCov:
    S = basis_matrix(data, basis, params.b)
    return LowRankCov(S, params.K, d_vector(params, data))


def run_replicate(design: SimDesign, rep: int, cfg: StudyConfig,
                  basis: BasisSpec | None = None) -> dict:
    """Simulate one field, fit it, and score every requested method."""
    basis = basis or BasisSpec(lattice_layout())
    rng = replicate_rng(cfg.seed, design, rep)
    K = sample_K(design.K_type, rng, basis.layout.knots)
    fld = simulate_field(design, K, rng, basis)
    data = fld.data
    row = {"rep": rep, **_cell_dict(design)}

    ols, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
    row["moran_I"], row["moran_p"] = morans_i(data.y - data.X @ ols, data.locations)

    fits = {}
    true_params = fld.params
    # true-parameter predictions use GLS beta under the true covariance
    fits["true"] = evaluate(true_params, data, basis).params
    init = initial_params(data, basis, design.sigma_eps2, cfg.em_b)
    if "em" in cfg.methods:
        fits["em"] = em_fit(init, data, basis, cfg.em).params
    if "aecm" in cfg.methods:
        res = aecm_fit(init, data, basis, cfg.aecm)
        fits["aecm"] = res.params
        row["b_hat"] = res.params.b
        row["aecm_cycles"] = res.iterations
        row["aecm_max_evals"] = max(res.evaluations[1:], default=0)

    kse = {}
    for name, params in fits.items():
        kse[name], met = _predict_metrics(params, fld, basis, cfg)
        row[f"mspe_{name}"] = met["mspe"]
        row[f"pic_{name}"] = met["pic"]
    for name in ("aecm", "em"):
        if name in fits and "true" in fits:
            row[f"rkse_{name}"] = rkse(kse[name], kse["true"])
            est = fits[name]
            row[f"kl_{name}"] = kl_divergence(
                data.X @ true_params.beta, _model_cov(true_params, data, basis),
                data.X @ est.beta, _model_cov(est, data, basis))
            row[f"ad_beta0_{name}"] = abs(est.beta[0] - true_params.beta[0])
            row[f"ad_beta1_{name}"] = abs(est.beta[1] - true_params.beta[1])
            row[f"ad_sigma_delta2_{name}"] = abs(est.sigma_delta2 - design.sigma_delta2)
            row[f"ad_K_{name}"] = float(np.median(np.abs(
                est.K - true_params.K)[np.triu_indices(basis.m)]))
    if "kl_aecm" in row and "kl_em" in row:
        row["kl_aecm_better"] = float(row["kl_aecm"] < row["kl_em"])
    return row


def _cell_dict(d: SimDesign) -> dict:
    return {"K_type": d.K_type, "sigma_delta2": d.sigma_delta2,
            "sigma_eps2": d.sigma_eps2, "b": d.b, "design": d.design}


def _run_one(args):
    design, rep, cfg = args
    try:
        return run_replicate(design, rep, cfg)
    except (EstimationError, NotPositiveDefinite) as exc:
        log.warning("replicate %d of %s failed: %s", rep, design, exc)
        return {"rep": rep, **_cell_dict(design), "failed": str(exc)}


def run_replicates(designs: Sequence[SimDesign], cfg: StudyConfig,
                   threads: int = 1) -> list[dict]:
    """Every replicate of every cell; row order is fixed regardless of threads."""
    jobs = [(d, r, cfg) for d in designs for r in range(cfg.replicates)]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(threads) as ex:
            return list(ex.map(_run_one, jobs, chunksize=4))
    return [_run_one(j) for j in jobs]


METRIC_COLUMNS = ("mspe_true", "mspe_aecm", "mspe_em", "rkse_aecm", "rkse_em",
                  "pic_true", "pic_aecm", "pic_em", "kl_aecm_better", "b_hat",
                  "ad_beta0_aecm", "ad_beta0_em", "ad_beta1_aecm", "ad_beta1_em",
                  "ad_K_aecm", "ad_K_em", "ad_sigma_delta2_aecm",
                  "ad_sigma_delta2_em", "moran_p")


def summarize(rows: list[dict], by=("K_type", "sigma_eps2", "b", "sigma_delta2",
                                    "design")) -> list[dict]:
    """Median of each metric over replicates, grouped by ``by``.

    Grouping by ``("K_type", "sigma_eps2", "b")`` pools the fine-scale
    variances and both designs into one median, as in the summary table.
    """
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in by), []).append(r)
    out = []
    for key, grp in groups.items():
        ok = [r for r in grp if "failed" not in r]
        rec = dict(zip(by, key))
        rec["replicates"] = len(ok)
        rec["failed"] = len(grp) - len(ok)
        for col in METRIC_COLUMNS:
            vals = [r[col] for r in ok if col in r]
            if vals:
                rec[col] = float(np.median(vals))
        vals = [r["moran_p"] for r in ok]
        if vals:
            rec["moran_significant"] = float(np.mean(np.array(vals) < 0.05))
        out.append(rec)
    return out


def run_study(designs: Sequence[SimDesign], cfg: StudyConfig = StudyConfig(),
              threads: int = 1, by=("K_type", "sigma_eps2", "b", "sigma_delta2",
                                    "design")):
    """Simulate, fit and score; returns ``(summary_rows, replicate_rows)``."""
    rows = run_replicates(designs, cfg, threads)
    return summarize(rows, by), rows
