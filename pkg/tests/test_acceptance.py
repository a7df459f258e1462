"""Acceptance criteria, one printed pass/fail line each.

The Monte Carlo criteria (4-6) share one study of 200 replicates per cell;
criteria 2, 3 and 8 share the same 100 simulated fields.
"""

import os
import time

import numpy as np
import pytest

from smefrk import estimation
from smefrk.basis import BasisSpec
from smefrk.estimation import AecmConfig, aecm_fit, em_fit, initial_params
from smefrk.geometry import KnotLayout, Metric, place_knots
from smefrk.model import Dataset, SMEParams, basis_matrix
from smefrk.numerics import LowRankCov, factorize, gls_beta, inverse_apply, logdet
from smefrk.prediction import PredictionRequest, predict
from smefrk.simulation import (DOMAIN, SimDesign, StudyConfig, design_grid,
                               kl_divergence, lattice_layout, morans_i,
                               replicate_rng, run_replicates, sample_design, sample_K,
                               simulate_field, summarize)

from conftest import criterion, random_spd

REPLICATES = int(os.environ.get("SMEFRK_STUDY_REPLICATES", 200))
THREADS = os.cpu_count() or 1

# reference medians for the Matern, sigma_eps2 = 1 rows: (MSPE, rKSE, PIC) x (AE, EM)
REFERENCE = {
    0.5: {"mspe": (0.51, 1.69), "rkse": (0.62, 1.90), "pic": (0.67, 0.89)},
    1.0: {"mspe": (0.36, 0.37), "rkse": (0.59, 0.70), "pic": (0.67, 0.72)},
    1.5: {"mspe": (0.33, 0.26), "rkse": (0.60, 0.61), "pic": (0.69, 0.72)},
    2.0: {"mspe": (0.33, 0.29), "rkse": (0.63, 0.66), "pic": (0.68, 0.73)},
}
MC_TOL = 0.35


def rel_err(got, ref):
    got, ref = np.asarray(got, float), np.asarray(ref, float)
    return float(np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-300))


# ---------------------------------------------------------------------------
# shared fixtures
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fields():
    """100 fields drawn across the whole simulation grid, all K types."""
    cells = design_grid()
    pick = np.random.default_rng(2020).permutation(len(cells))[:100]
    basis = BasisSpec(lattice_layout())
    out = []
    for i in sorted(pick):
        d = cells[i]
        rng = replicate_rng(2020, d, 0)
        fld = simulate_field(d, sample_K(d.K_type, rng), rng, basis)
        out.append((d, fld.data))
    return basis, out


@pytest.fixture(scope="module")
def aecm_runs(fields):
    """Open-bracket AECM on every field with an independent evaluation counter."""
    basis, flds = fields
    original = estimation._em_run
    calls: list[str] = []

    def counted(*args, **kwargs):
        calls.append(args[6] if len(args) > 6 else kwargs.get("context", ""))
        return original(*args, **kwargs)

    runs = []
    estimation._em_run = counted
    try:
        for d, data in flds:
            calls.clear()
            res = aecm_fit(initial_params(data, basis, d.sigma_eps2), data, basis)
            per_cycle: dict = {}
            for ctx in calls:
                c = int(ctx.split(",")[0].split()[1])
                per_cycle[c] = per_cycle.get(c, 0) + 1
            runs.append((d, res, per_cycle))
    finally:
        estimation._em_run = original
    return runs


@pytest.fixture(scope="module")
def matern_study():
    """Matern, sigma_eps2 = 1 cells: 4 b x 3 sigma_delta2 x 2 designs."""
    cells = design_grid(K_types=("matern",), sigma_eps2=(1.0,))
    t0 = time.time()
    rows = run_replicates(cells, StudyConfig(replicates=REPLICATES, seed=2020), THREADS)
    return rows, time.time() - t0


@pytest.fixture(scope="module")
def wishart_b_hat():
    """b estimates for the two Wishart K types at sigma_eps2 = 1."""
    cells = design_grid(K_types=("wishart_positive", "wishart"), sigma_eps2=(1.0,))
    cfg = StudyConfig(replicates=REPLICATES, seed=2020, methods=("aecm",))
    return run_replicates(cells, cfg, THREADS)


# ---------------------------------------------------------------------------
# 1. low-rank algebra against dense oracles
# ---------------------------------------------------------------------------

def _instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 201))
    m = int(rng.integers(2, 11))
    p = int(rng.integers(1, 5))
    dim = int(rng.integers(1, 3))
    levels = [m] if m < 4 or rng.random() < 0.5 else [m // 2, m - m // 2]
    knots = rng.uniform(0, 10, (m, dim))
    layout = KnotLayout(knots, np.repeat(np.arange(1, len(levels) + 1), levels))
    basis = BasisSpec(layout)
    locs = rng.uniform(0, 10, (n, dim))
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    data = Dataset(locs, X, X @ rng.standard_normal(p) + rng.standard_normal(n),
                   rng.uniform(0.5, 2, n), rng.uniform(0.5, 2, n))
    params = SMEParams(random_spd(rng, m, rng.uniform(0.2, 5)), rng.uniform(0.05, 1),
                       rng.uniform(0.05, 1), np.zeros(p), rng.uniform(1.0, 3.0))
    idx = rng.choice(n, min(n, 10), replace=False)
    targets = np.vstack([rng.uniform(0, 10, (20, dim)), locs[idx]])
    X0 = np.vstack([np.column_stack([np.ones(20), rng.standard_normal((20, p - 1))]),
                    X[idx]])
    vd0 = np.concatenate([rng.uniform(0.5, 2, 20), data.vdelta[idx]])
    return rng, data, basis, params, PredictionRequest(targets, X0, vd0)


def test_criterion_1_low_rank_algebra():
    t0 = time.time()
    worst = {k: 0.0 for k in ("inverse", "logdet", "beta", "mean", "kse")}
    with criterion("1", "low-rank algebra vs dense oracles (50 instances)") as v:
        for seed in range(50):
            rng, data, basis, params, req = _instance(seed)
            S = basis_matrix(data, basis, params.b)
            D = params.sigma_delta2 * data.vdelta + params.sigma_eps2 * data.veps
            Sigma = S @ params.K @ S.T + np.diag(D)
            Si = np.linalg.inv(Sigma)
            f = factorize(LowRankCov(S, params.K, D))
            B = rng.standard_normal((data.n, 3))
            worst["inverse"] = max(worst["inverse"],
                                   rel_err(inverse_apply(f, B), np.linalg.solve(Sigma, B)))
            worst["logdet"] = max(worst["logdet"],
                                  rel_err(logdet(f), np.linalg.slogdet(Sigma)[1]))
            X, y = data.X, data.y
            A = X.T @ Si @ X
            beta_ref = np.linalg.solve(A, X.T @ Si @ y)
            worst["beta"] = max(worst["beta"], rel_err(gls_beta(X, y, f)[0], beta_ref))
            Av = basis.matrix(req.targets, params.b).toarray()
            same = np.all(req.targets[:, None, :] == data.locations[None, :, :], axis=2)
            C = Av @ params.K @ S.T + params.sigma_delta2 * req.vdelta0[:, None] * same
            mean_ref = req.X0 @ beta_ref + C @ Si @ (y - X @ beta_ref)
            G = req.X0 - C @ Si @ X
            var_ref = (np.einsum("ij,jk,ik->i", Av, params.K, Av)
                       + params.sigma_delta2 * req.vdelta0
                       - np.einsum("ij,jk,ik->i", C, Si, C)
                       + np.einsum("ij,jk,ik->i", G, np.linalg.inv(A), G))
            out = predict(params, data, basis, req)
            worst["mean"] = max(worst["mean"], rel_err(out.yhat, mean_ref))
            worst["kse"] = max(worst["kse"], rel_err(out.kse, np.sqrt(var_ref)))
        for k, e in worst.items():
            v.check(e <= 1e-8, f"{k} max rel err {e:.1e}")
        dt = time.time() - t0
        v.check(dt < 30, f"{dt:.1f}s")


# ---------------------------------------------------------------------------
# 2-3. EM ascent, AECM reduction and ascent
# ---------------------------------------------------------------------------

def test_criterion_2_em_ascent(fields):
    basis, flds = fields
    t0 = time.time()
    with criterion("2", "EM restricted log-likelihood non-decreasing (100 fields)") as v:
        worst, bad, kinds = 0.0, 0, set()
        for d, data in flds:
            kinds.add(d.K_type)
            res = em_fit(initial_params(data, basis, d.sigma_eps2), data, basis)
            steps = np.diff([ll for _, ll in res.loglik_trace])
            worst = min(worst, float(steps.min(initial=0.0)))
            bad += int(np.any(steps < -1e-8))
        v.check(len(flds) == 100 and len(kinds) == 3, f"{len(flds)} fields, K types {sorted(kinds)}")
        v.check(bad == 0, f"{bad} fields with a decrease; largest drop {worst:.1e}")
        dt = time.time() - t0
        v.check(dt < 300, f"{dt:.1f}s")


def test_criterion_3_aecm_reduction_and_ascent(fields, aecm_runs):
    basis, flds = fields
    with criterion("3", "AECM collapsed = EM; accepted log-likelihood non-decreasing") as v:
        dev = 0.0
        for d, data in flds:
            init = initial_params(data, basis, d.sigma_eps2, b=1.5)
            em = em_fit(init, data, basis)
            ae = aecm_fit(init, data, basis, AecmConfig(b_bracket=(1.5, 1.5)))
            a = np.array([ll for _, ll in ae.loglik_trace])
            e = np.array([ll for _, ll in em.loglik_trace])
            if a.shape != e.shape:
                dev = np.inf
                continue
            dev = max(dev, float(np.max(np.abs(a - e))),
                      float(np.max(np.abs(ae.params.K - em.params.K))),
                      abs(ae.params.sigma_delta2 - em.params.sigma_delta2))
        v.check(dev <= 1e-12, f"collapsed max deviation {dev:.1e}")
        drops = [float(np.min(np.diff([ll for _, ll in res.loglik_trace]), initial=0.0))
                 for _, res, _ in aecm_runs]
        nbad = sum(x < 0 for x in drops)
        v.check(nbad == 0, f"open bracket: {nbad}/{len(drops)} fields with a decrease")


# ---------------------------------------------------------------------------
# 4-6. desk-scale Monte Carlo study
# ---------------------------------------------------------------------------

def _pooled(rows):
    return {r["b"]: r for r in summarize(rows, by=("K_type", "sigma_eps2", "b"))}


def test_criterion_4_prediction_summary(matern_study):
    rows, elapsed = matern_study
    with criterion("4", f"Matern sigma_eps2=1 prediction medians ({REPLICATES} reps/cell)") as v:
        pooled = _pooled(rows)
        failed = sum("failed" in r for r in rows)
        v.check(failed == 0, f"{failed} failed replicates")

        def within(got, ref, what):
            lo, hi = ref * (1 - MC_TOL), ref * (1 + MC_TOL)
            v.check(lo <= got <= hi, f"{what} {got:.3f} in [{lo:.3f}, {hi:.3f}]")

        within(pooled[0.5]["mspe_em"], 1.69, "b=0.5 EM MSPE")
        within(pooled[0.5]["mspe_aecm"], 0.51, "b=0.5 AECM MSPE")
        within(pooled[1.5]["mspe_em"], 0.26, "b=1.5 EM MSPE")
        for b, ref in REFERENCE.items():
            r = pooled[b]
            for metric, (ae, em) in ref.items():
                got = r[f"{metric}_aecm"] - r[f"{metric}_em"]
                v.check(np.sign(got) == np.sign(ae - em),
                        f"b={b} {metric} AE-EM {got:+.3f} (ref {ae - em:+.2f})")
            v.check(r["mspe_true"] < min(r["mspe_aecm"], r["mspe_em"]),
                    f"b={b} true MSPE {r['mspe_true']:.3f} lowest")
        v.check(elapsed < 7200, f"study {elapsed / 60:.1f} min on {THREADS} thread(s)")


def test_criterion_5_b_recovery(matern_study, wishart_b_hat):
    rows, _ = matern_study
    with criterion("5", "median b-hat recovery at sigma_eps2=1 (all K types)") as v:
        for kind, rs in (("matern", rows), ("wishart", wishart_b_hat)):
            for b in (0.5, 1.0, 1.5, 2.0):
                hats = [r["b_hat"] for r in rs if r["b"] == b and "b_hat" in r]
                if kind == "wishart":
                    for k in ("wishart_positive", "wishart"):
                        sub = [r["b_hat"] for r in rs
                               if r["b"] == b and r["K_type"] == k and "b_hat" in r]
                        _check_b(v, k, b, sub)
                    continue
                _check_b(v, kind, b, hats)


def _check_b(v, kind, b, hats):
    med = float(np.median(hats))
    if b <= 1.5:
        v.check(abs(med - b) <= 0.3, f"{kind} b={b}: {med:.3f} (n={len(hats)})")
    else:
        v.check(med <= 2.0, f"{kind} b={b}: {med:.3f} <= 2 (n={len(hats)})")


def test_criterion_6_true_parameter_pic(matern_study):
    rows, _ = matern_study
    with criterion("6", "true-parameter PIC in [0.92, 0.96], sigma_delta2=1 Matern cells") as v:
        cells = summarize([r for r in rows if r["sigma_delta2"] == 1.0])
        v.check(len(cells) == 8, f"{len(cells)} cells")
        for c in cells:
            v.check(0.92 <= c["pic_true"] <= 0.96,
                    f"b={c['b']} {c['design']}: {c['pic_true']:.3f}")


# ---------------------------------------------------------------------------
# 7. metric unit oracles
# ---------------------------------------------------------------------------

def test_criterion_7_metric_oracles():
    with criterion("7", "KL and Moran's I unit oracles") as v:
        rng = np.random.default_rng(7)
        A = rng.standard_normal((4, 4))
        P = LowRankCov(rng.uniform(size=(50, 4)), A @ A.T + np.eye(4), rng.uniform(0.2, 1, 50))
        mu = rng.standard_normal(50)
        kl_pp = kl_divergence(mu, P, mu, P)
        v.check(abs(kl_pp) <= 1e-9, f"KL(P,P) = {kl_pp:.1e}")
        one = LowRankCov(np.zeros((1, 1)), np.eye(1), np.ones(1))
        kl1 = kl_divergence([0.0], one, [1.0], one)
        v.check(abs(kl1 - 0.5) <= 1e-12, f"KL(N(0,1),N(1,1)) = {kl1:.15f}")

        n, reps = 64, 1000
        stats_, pvals = [], []
        for _ in range(reps):
            sites = sample_design(DOMAIN, n, "random", rng)
            I, p = morans_i(rng.standard_normal(n), sites.astype(float))
            stats_.append(I)
            pvals.append(p)
        stats_ = np.array(stats_)
        se = stats_.std(ddof=1) / np.sqrt(reps)
        gap = stats_.mean() + 1 / (n - 1)
        v.check(abs(gap) <= 4 * se,
                f"null mean {stats_.mean():.4f} vs {-1 / (n - 1):.4f} (4 SE = {4 * se:.4f})")
        rate = float(np.mean(np.array(pvals) < 0.05))
        v.check(abs(rate - 0.05) <= 0.02, f"null rejection rate {rate:.3f}")


# ---------------------------------------------------------------------------
# 8. evaluations per AECM cycle
# ---------------------------------------------------------------------------

def test_criterion_8_evaluations_per_cycle(aecm_runs):
    with criterion("8", "candidate evaluations per AECM cycle (counted)") as v:
        worst = {"golden": 0, "quadratic": 0}
        agree = True
        for _, res, per_cycle in aecm_runs:
            for cycle, phase in enumerate(res.phases):
                if phase in worst:
                    worst[phase] = max(worst[phase], per_cycle.get(cycle, 0))
            agree &= [per_cycle.get(c, 0) for c in range(len(res.phases))] == res.evaluations
        v.check(worst["golden"] <= 4, f"golden max {worst['golden']}")
        v.check(worst["quadratic"] <= 3, f"quadratic max {worst['quadratic']}")
        v.check(agree, "counter matches reported evaluations")


# ---------------------------------------------------------------------------
# 9. exact interpolation without measurement error
# ---------------------------------------------------------------------------

def test_criterion_9_exact_interpolation():
    with criterion("9", "sigma_eps2=0 kriging reproduces y at data sites (20 instances)") as v:
        worst = 0.0
        for seed in range(20):
            _, data, basis, params, _ = _instance(100 + seed)
            params = params.with_(sigma_eps2=0.0)
            req = PredictionRequest(data.locations, data.X, data.vdelta)
            out = predict(params, data, basis, req)
            worst = max(worst, float(np.max(np.abs(out.yhat - data.y))))
        v.check(worst <= 1e-8, f"max |yhat - y| = {worst:.1e}")


# ---------------------------------------------------------------------------
# 2-D great-circle smoke test
# ---------------------------------------------------------------------------

def test_great_circle_smoke():
    with criterion("smoke", "2-D great-circle, 5000 points, 369 knots, 2 resolutions") as v:
        t0 = time.time()
        rng = np.random.default_rng(0)
        n = 5000
        lonlat = np.column_stack([rng.uniform(-105, -80, n), rng.uniform(30, 45, n)])
        X = np.column_stack([np.ones(n), lonlat[:, 1]])
        y = (10 + 0.1 * lonlat[:, 1] + 2 * np.sin(lonlat[:, 0] / 3) * np.cos(lonlat[:, 1] / 2)
             + rng.normal(0, 0.5, n))
        data = Dataset(lonlat, X, y)
        layout = place_knots(((-105, -80), (30, 45)), [(9, 5), (18, 18)],
                             "regular_triangular_2d")
        basis = BasisSpec(layout, Metric.parse("greatcircle"))
        v.check(layout.m == 369 and layout.levels == [1, 2], f"m={layout.m}")
        res = aecm_fit(initial_params(data, basis, 0.25), data, basis)
        gx, gy = np.meshgrid(np.linspace(-105, -80, 50), np.linspace(30, 45, 30))
        targets = np.column_stack([gx.ravel(), gy.ravel()])
        out = predict(res.params, data, basis,
                      PredictionRequest(targets, np.column_stack([np.ones(len(targets)),
                                                                  targets[:, 1]])))
        v.check(np.all(np.isfinite(out.yhat)) and np.all(np.isfinite(out.kse)),
                f"b-hat {res.params.b:.3f}, {len(targets)} predictions finite")
        dt = time.time() - t0
        v.check(dt < 600, f"{dt:.0f}s")
