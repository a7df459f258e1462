"""EM estimation of ``K`` and the fine-scale variance, and AECM estimation of
the bandwidth constant ``b`` on top of it.

The AECM driver alternates an EM block for ``(K, sigma_delta2)`` with a
search over ``b`` on the restricted likelihood: an EM burn-in at a few
starting values of ``b``, golden-section cycles on a bracket, then
successive parabolic interpolation. Every cycle refits ``(K, sigma_delta2)``
at each candidate ``b`` and keeps the best candidate only if it beats the
incumbent, so accepted restricted log-likelihoods never decrease.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSpec
from .model import (Dataset, Evaluation, FitResult, SMEParams, basis_matrix,
                    evaluate)
from .numerics import NotPositiveDefinite, diag_inverse, tri_solve

log = logging.getLogger(__name__)

INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0  # 1/phi = 0.618...
TIE_TOL = 1e-12


class EstimationError(RuntimeError):
    """Numerical failure during fitting (carries the partial trace)."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 500
    tol_loglik: float = 1e-6
    weak_tol: float = 1e-3

    def __post_init__(self):
        if not (self.tol_loglik > 0 and self.weak_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.weak_tol < self.tol_loglik:
            raise ValueError("weak_tol must be >= tol_loglik")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class AecmConfig:
    em: EmConfig = field(default_factory=EmConfig)
    b_bracket: tuple = (0.1, 4.0)
    golden_iters: int = 5
    quad_tol: float = 1e-3
    initial_b_set: tuple = (0.5, 1.0, 1.5, 2.0)
    inner_max_iter: int = 100
    max_cycles: int = 60

    def __post_init__(self):
        lo, hi = map(float, self.b_bracket)
        if not 0 < lo <= hi:
            raise ValueError("b bracket must satisfy 0 < lo <= hi")
        if lo < hi:
            if any(not lo <= b <= hi for b in self.initial_b_set):
                raise ValueError("initial b values must lie inside the bracket")
            if 1.5 not in self.initial_b_set and lo <= 1.5 <= hi:
                raise ValueError("initial b set must contain 1.5")
        if self.quad_tol <= 0 or self.golden_iters < 0:
            raise ValueError("invalid search settings")

    @property
    def collapsed(self) -> bool:
        return float(self.b_bracket[0]) == float(self.b_bracket[1])


def initial_params(data: Dataset, basis: BasisSpec, sigma_eps2: float,
                   b: float = 1.5) -> SMEParams:
    """Starting values splitting the OLS residual variance 90/10 between
    ``K`` (as a multiple of the identity) and ``sigma_delta2``."""
    beta, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
    v = float(np.var(data.y - data.X @ beta, ddof=data.p))
    v = max(v, 1e-8)
    return SMEParams(0.9 * v * np.eye(basis.m), 0.1 * v / float(np.mean(data.vdelta)),
                     sigma_eps2, beta, b)


# ---------------------------------------------------------------------------
# EM block
# ---------------------------------------------------------------------------

def _em_step(ev: Evaluation, data: Dataset, restricted: bool = False) -> SMEParams:
    """EM update of ``K`` and ``sigma_delta2`` with ``beta`` plugged in by GLS.

    ``restricted=True`` replaces ``Sigma^-1`` by
    ``P = Sigma^-1 - Sigma^-1 X (X' Sigma^-1 X)^-1 X' Sigma^-1`` in the
    variance terms, the EM step for the restricted likelihood (``beta``
    integrated out). ``P y = Sigma^-1 r``, so the mean terms are shared.
    """
    p, f = ev.params, ev.f
    K = p.K
    G = f.S.T @ f.DinvS
    W = tri_solve(f.C2, G)
    M = G - W.T @ W  # S' Sigma^-1 S
    dinv = diag_inverse(f)
    if restricted:
        Z = tri_solve(ev.C3, np.ascontiguousarray((f.S.T @ ev.SiX).T))
        M = M - Z.T @ Z
        ZX = tri_solve(ev.C3, np.ascontiguousarray(ev.SiX.T))
        dinv = dinv - np.einsum("ij,ij->j", ZX, ZX)
    Ku = K @ (f.S.T @ ev.Sir)
    K_new = K - K @ M @ K + np.outer(Ku, Ku)
    K_new = 0.5 * (K_new + K_new.T)
    s2 = p.sigma_delta2
    if s2 > 0:
        tr = float(data.vdelta @ (ev.Sir ** 2) - data.vdelta @ dinv)
        s2 = s2 + s2 * s2 / data.n * tr
    return p.with_(K=K_new, sigma_delta2=max(s2, 0.0))


def _ridged(params: SMEParams) -> SMEParams:
    K = params.K
    m = K.shape[0]
    return params.with_(K=K + 1e-8 * np.trace(K) / m * np.eye(m))


def _evaluate_safe(params, data, basis, S, context=""):
    """Evaluate, retrying once with a small ridge on ``K``."""
    try:
        return evaluate(params, data, basis, S), False
    except NotPositiveDefinite as exc:
        if exc.what == "X' Sigma^-1 X":
            raise EstimationError(f"{context}: {exc}") from exc
        try:
            return evaluate(_ridged(params), data, basis, S), True
        except NotPositiveDefinite as exc2:
            raise EstimationError(f"{context}: {exc2}") from exc2


def em_update(params: SMEParams, data: Dataset, basis: BasisSpec,
              S=None) -> SMEParams:
    """One EM update of ``K`` and ``sigma_delta2`` at fixed ``b``.

    ``beta`` in the result is the GLS estimate used for the update.
    """
    if S is None:
        S = basis_matrix(data, basis, params.b)
    ev, _ = _evaluate_safe(params, data, basis, S, "em_update")
    return _em_step(ev, data).with_(beta=ev.beta)


def _em_run(params, data, basis, S, tol, max_iter, context="em"):
    """Iterate EM; returns (best evaluation, trace, converged, iters, ridges)."""
    ev, ridge = _evaluate_safe(params, data, basis, S, f"{context} iteration 0")
    ridges = int(ridge)
    trace = [(0, ev.loglik)]
    best = ev
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            ev_new, ridge = _evaluate_safe(_em_step(ev, data), data, basis, S,
                                           f"{context} iteration {it}")
            if ev_new.loglik < ev.loglik:
                # the plug-in step lost restricted likelihood; the restricted
                # step cannot
                ridges += int(ridge)
                ev_new, ridge = _evaluate_safe(_em_step(ev, data, restricted=True),
                                               data, basis, S,
                                               f"{context} iteration {it}")
        except EstimationError as exc:
            exc.trace = trace
            raise
        ridges += int(ridge)
        prev = ev.loglik
        ev = ev_new
        trace.append((it, ev.loglik))
        if ev.loglik >= best.loglik:
            best = ev
        if abs(ev.loglik - prev) / (1.0 + abs(ev.loglik)) < tol:
            converged = True
            break
    return best, trace, converged, it, ridges


def em_fit(init: SMEParams, data: Dataset, basis: BasisSpec,
           cfg: EmConfig = EmConfig(), S=None) -> FitResult:
    """EM to convergence at the fixed ``b = init.b``.

    Stops when the relative change of the restricted log-likelihood drops
    below ``cfg.tol_loglik`` or after ``cfg.max_iter`` updates.
    """
    if S is None:
        S = basis_matrix(data, basis, init.b)
    best, trace, conv, iters, ridges = _em_run(init, data, basis, S,
                                               cfg.tol_loglik, cfg.max_iter)
    if not conv:
        log.warning("EM did not converge in %d iterations", cfg.max_iter)
    return FitResult(best.params, trace, [(0, init.b, best.loglik)], conv,
                     iters, "em", ridge_events=ridges)


# ---------------------------------------------------------------------------
# Search over b
# ---------------------------------------------------------------------------

def golden_candidates(bracket) -> list[float]:
    """Bracket ends and the two golden-section interior points."""
    lo, hi = map(float, bracket)
    if not lo < hi:
        raise ValueError("degenerate bracket")
    w = hi - lo
    return [lo, lo + (1 - INV_PHI) * w, lo + INV_PHI * w, hi]


def golden_shrink(cands, lls) -> tuple:
    """Shrunken bracket and retained interior point after one golden cycle."""
    a, c, d, b = cands
    if lls[1] >= lls[2]:
        return (a, d), c
    return (c, b), d


def quadratic_candidates(bs, lls, bracket=None) -> float:
    """Next ``b`` from three evaluated points.

    Returns the vertex of the interpolating parabola, clamped to ``bracket``
    (default: the span of the points). If the middle point is not the largest
    a golden-section step towards the best point is returned instead; if the
    three values are collinear, the midpoint.
    """
    order = np.argsort(bs)
    (b1, b2, b3) = np.asarray(bs, dtype=float)[order]
    (l1, l2, l3) = np.asarray(lls, dtype=float)[order]
    if not (b1 < b2 < b3) or not np.all(np.isfinite([l1, l2, l3])):
        raise ValueError("need three distinct b values with finite log-likelihoods")
    lo, hi = (b1, b3) if bracket is None else map(float, bracket)
    if not (l2 >= l1 and l2 >= l3):
        # golden step from the best point into its neighbouring gap
        if l1 > l3:
            v = b1 + (1 - INV_PHI) * (b2 - b1)
        else:
            v = b3 - (1 - INV_PHI) * (b3 - b2)
        return float(min(max(v, lo), hi))
    num = (b2 - b1) ** 2 * (l2 - l3) - (b2 - b3) ** 2 * (l2 - l1)
    den = (b2 - b1) * (l2 - l3) - (b2 - b3) * (l2 - l1)
    scale = max(abs(l1), abs(l2), abs(l3), 1.0)
    if abs(den) <= 1e-14 * scale * (b3 - b1):
        return float(min(max(0.5 * (b1 + b3), lo), hi))
    v = b2 - 0.5 * num / den
    return float(min(max(v, lo), hi))


def _next_triple(triple, lls, v, lo, hi):
    """Triple for the next quadratic cycle, at most half as wide."""
    x1, x2, x3 = triple
    w = x3 - x1
    concave = lls[1] >= lls[0] and lls[1] >= lls[2]
    if concave:
        h = min(max(2 * abs(v - x2), w / 8), w / 4)
    else:
        h = w / 4
    h = max(h, 1e-12)
    c = min(max(v, lo + h), hi - h) if hi - lo > 2 * h else 0.5 * (lo + hi)
    return (max(c - h, lo), c, min(c + h, hi))


@dataclass
class _Candidate:
    b: float
    ev: Evaluation
    iters: int


def aecm_fit(init: SMEParams, data: Dataset, basis: BasisSpec,
             cfg: AecmConfig = AecmConfig()) -> FitResult:
    """Estimate ``K``, ``sigma_delta2`` and ``b`` jointly.

    With a collapsed bracket (``lo == hi``) this is exactly :func:`em_fit`
    at that ``b``.
    """
    lo, hi = map(float, cfg.b_bracket)
    if cfg.collapsed:
        res = em_fit(init.with_(b=lo), data, basis, cfg.em)
        res.method = "aecm"
        return res
    if not lo <= init.b <= hi:
        raise ValueError(f"initial b={init.b} outside bracket {cfg.b_bracket}")

    weak = cfg.em.weak_tol
    S_cache: dict = {}

    def S_at(b):
        if b not in S_cache:
            if len(S_cache) > 64:
                S_cache.clear()
            S_cache[b] = basis_matrix(data, basis, b)
        return S_cache[b]

    ridges = 0
    b_trace: list = []
    evaluations: list = []
    phases: list = []

    def refit(theta: SMEParams, b: float, tol: float, max_iter: int, cycle: int):
        nonlocal ridges
        try:
            best, _, _, iters, r = _em_run(theta.with_(b=b), data, basis, S_at(b),
                                           tol, max_iter, f"cycle {cycle}, b={b:.6g}")
        except EstimationError as exc:
            log.info("candidate b=%.6g failed: %s", b, exc)
            return None
        ridges += r
        b_trace.append((cycle, b, best.loglik))
        return _Candidate(b, best, iters)

    def choose(cands, incumbent):
        ok = [c for c in cands if c is not None]
        if not ok:
            return None
        top = max(c.ev.loglik for c in ok)
        tied = [c for c in ok if top - c.ev.loglik <= TIE_TOL * max(1.0, abs(top))]
        ref = incumbent.b if incumbent is not None else init.b
        return min(tied, key=lambda c: abs(c.b - ref))

    # EM burn-in at each starting b
    cycle = 0
    burn = [refit(init, b, weak, cfg.em.max_iter, cycle) for b in cfg.initial_b_set]
    evaluations.append(len(cfg.initial_b_set))
    phases.append("burn-in")
    inc = choose(burn, None)
    if inc is None:
        raise EstimationError("all burn-in fits failed", b_trace)
    trace = [(cycle, inc.ev.loglik)]

    def accept(cands):
        nonlocal inc
        best = choose(cands, inc)
        if best is None:
            raise EstimationError(f"all candidates failed in cycle {cycle}", b_trace)
        if best.ev.loglik > inc.ev.loglik:
            inc = best
        trace.append((cycle, inc.ev.loglik))

    # golden-section cycles
    bracket = (lo, hi)
    retained = None
    for _ in range(cfg.golden_iters):
        if bracket[1] - bracket[0] < cfg.quad_tol or cycle >= cfg.max_cycles:
            break
        cycle += 1
        bs = golden_candidates(bracket)
        theta = inc.ev.params
        cands = [refit(theta, b, weak, cfg.inner_max_iter, cycle) for b in bs]
        evaluations.append(len(bs))
        phases.append("golden")
        prev = inc.ev.loglik
        accept(cands)
        lls = [c.ev.loglik if c is not None else -np.inf for c in cands]
        bracket, retained = golden_shrink(bs, lls)
        if abs(inc.ev.loglik - prev) / (1 + abs(prev)) < weak and cycle > 1:
            break

    # quadratic-interpolation cycles
    if retained is None:
        retained = min(max(inc.b, bracket[0]), bracket[1])
    if not bracket[0] < retained < bracket[1]:
        retained = 0.5 * (bracket[0] + bracket[1])
    triple = (bracket[0], retained, bracket[1])
    while triple[2] - triple[0] >= cfg.quad_tol and cycle < cfg.max_cycles:
        cycle += 1
        theta = inc.ev.params
        cands = [refit(theta, b, weak, cfg.inner_max_iter, cycle) for b in triple]
        evaluations.append(len(triple))
        phases.append("quadratic")
        accept(cands)
        lls = [c.ev.loglik if c is not None else -np.inf for c in cands]
        if not np.all(np.isfinite(lls)):
            best_b = triple[int(np.argmax(lls))]
            v = best_b
            lls = [0.0, 1.0, 0.0]  # treat as concave around the best point
        else:
            v = quadratic_candidates(triple, lls)
        triple = _next_triple(triple, lls, v, lo, hi)

    # finish with (K, sigma_delta2) fully converged at the accepted b
    converged = triple[2] - triple[0] < cfg.quad_tol
    cycle += 1
    final = refit(inc.ev.params, inc.b, cfg.em.tol_loglik, cfg.em.max_iter, cycle)
    evaluations.append(1)
    phases.append("final")
    accept([final])
    return FitResult(inc.ev.params, trace, b_trace, converged, cycle, "aecm",
                     evaluations, ridges, phases)
