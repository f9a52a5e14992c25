"""Covariance estimation, Wald tests, outlier flags, breakdown constants.

The covariance of the composite estimates is the usual sandwich: the
outer bread is the numerically differentiated analytic gradient, the
meat is the empirical outer product of per unit score contributions
with the scale quantities frozen at the fit. Outlier detection works on
cells, pairs, and whole rows against chi squared cutoffs. The breakdown
constants count the worst case exact fit configurations of the pair
designs by direct enumeration where that is affordable and by a seeded
random search (flagged approximate) where not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import linalg as sla
from scipy import stats

from .fit import FitResult
from .model import Dataset, ModelSpec, PairIndex, pair_arrays, shape_matrix
from .objective import (PairWorkspace, _col_mscale, _inv_block_parts,
                        grad_beta, grad_gamma, pair_distances, tilde_weights)
from .scales import RhoConfig

_FD_STEP = 1e-4


@dataclass
class InferenceResult:
    names: list[str]
    estimate: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p_value: np.ndarray


def _wald_stats(estimate, cov):
    # Componentwise z statistics and two sided normal p values.
    estimate = np.asarray(estimate, dtype=float).ravel()
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, estimate / se, np.inf * np.sign(estimate))
    p = 2.0 * stats.norm.sf(np.abs(z))
    return se, z, p


def wald_test(inference: "InferenceResult", index: int) -> tuple[float, float]:
    """Stored z statistic and two sided p value of one parameter."""
    return float(inference.z[index]), float(inference.p_value[index])


def _objective_of(fit: FitResult) -> str:
    if fit.estimator == "composite_tau":
        return "tau"
    if fit.estimator == "composite_s":
        return "s"
    raise ValueError(
        "sandwich covariance is defined for the composite fits, got "
        + fit.estimator)


def _full_gradient(ws, beta, gamma, rho, objective):
    return np.concatenate([
        grad_beta(ws, beta, gamma, rho, objective),
        grad_gamma(ws, beta, gamma, rho, objective),
    ])


def unit_scores(ws: PairWorkspace, beta, gamma, rho: RhoConfig,
                objective: str = "tau") -> np.ndarray:
    """Per unit summands of the objective gradient, frozen scales.

    Rows sum to the analytic gradient. Used as the meat of the sandwich.
    """
    beta = np.asarray(beta, dtype=float).ravel()
    M, parts = pair_distances(ws, beta, gamma)
    s, degen = _col_mscale(M, rho.c1, rho.b)
    wt = tilde_weights(M, s, degen, rho, objective)
    a11, a12, a22 = _inv_block_parts(parts)
    rj2, rjl, rl2, rj, rl = ws.residual_products(beta)

    cj = wt * (a11 * rj + a12 * rl)
    cl = wt * (a12 * rj + a22 * rl)
    gb = np.einsum("np,npk->nk", cj, ws.XJ) + np.einsum("np,npk->nk", cl, ws.XL)
    gb *= -2.0 / ws.n

    sjj, sll, sjl, det = parts
    G = wt / np.sqrt(det)
    U1 = G * rj2
    U2 = G * rjl
    U3 = G * rl2
    J = ws.spec.n_structures
    gg = np.empty((ws.n, J))
    for r in range(J):
        vjj, vll, vjl = ws.vjj[r], ws.vll[r], ws.vjl[r]
        cr = 0.5 * vjj * sll + 0.5 * vll * sjj - vjl * sjl
        b11 = vll - cr * sll / det
        b12 = -(vjl - cr * sjl / det)
        b22 = vjj - cr * sjj / det
        gg[:, r] = U1 @ b11 + 2.0 * (U2 @ b12) + U3 @ b22
    gg /= ws.n
    return np.hstack([gb, gg])


def sandwich_cov(ds: Dataset, spec: ModelSpec, fit: FitResult,
                 rho: RhoConfig | None = None) -> InferenceResult:
    """Sandwich covariance and Wald tests for a composite fit.

    The bread is the central difference Hessian of the analytic
    gradient at the estimate, the meat the empirical outer product of
    the per unit scores. The result estimates the covariance of the
    estimate itself, so no further sample size scaling is needed.
    """
    objective = _objective_of(fit)
    rho = rho or RhoConfig()
    ws = PairWorkspace(ds, spec)
    lam = np.concatenate([fit.beta, fit.gamma])
    k = fit.beta.size
    d = lam.size

    def grad_at(v):
        return _full_gradient(ws, v[:k], v[k:], rho, objective)

    H = np.empty((d, d))
    for r in range(d):
        h = _FD_STEP * (1.0 + abs(lam[r]))
        up, dn = lam.copy(), lam.copy()
        up[r] += h
        dn[r] -= h
        H[:, r] = (grad_at(up) - grad_at(dn)) / (2.0 * h)
    H = 0.5 * (H + H.T)

    S = unit_scores(ws, fit.beta, fit.gamma, rho, objective)
    meat = S.T @ S
    try:
        Hi = np.linalg.inv(H)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "singular objective Hessian, condition number "
            f"{np.linalg.cond(H):.3e}") from exc
    cov = Hi @ meat @ Hi.T
    cov = 0.5 * (cov + cov.T)
    # Clamp tiny negative eigenvalues arising from the differencing.
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    cov = (vecs * vals) @ vecs.T
    cov = 0.5 * (cov + cov.T)

    names = [f"beta[{i}]" for i in range(k)] + \
        [f"gamma[{r}]" for r in range(d - k)]
    se, z, p = _wald_stats(lam, cov)
    return InferenceResult(names=names, estimate=lam, cov=cov, se=se, z=z,
                           p_value=p)


@dataclass
class OutlierReport:
    alpha: float
    thresholds: dict[int, float]
    flags: dict[tuple[int, tuple[int, ...]], bool]

    def flagged(self) -> list[tuple[int, tuple[int, ...]]]:
        return [key for key, v in self.flags.items() if v]

    def counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for (unit, idx), v in self.flags.items():
            if v:
                out[len(idx)] = out.get(len(idx), 0) + 1
        return out


def detect_outliers(ds: Dataset, spec: ModelSpec, fit: FitResult,
                    alpha: float = 0.99,
                    levels: tuple[str, ...] = ("cell", "couple", "row"),
                    ) -> OutlierReport:
    """Flag cells, pairs, and rows whose squared distance under the
    fitted covariance exceeds the chi squared quantile of order alpha
    at the matching dimension."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha is a quantile order in (0, 1)")
    if fit.eta <= 0:
        raise ValueError("outlier detection needs a positive error variance")
    n, p = ds.n, ds.p
    C = fit.eta * shape_matrix(spec, fit.gamma)
    R = ds.y - np.einsum("npk,k->np", ds.x, fit.beta)
    flags: dict[tuple[int, tuple[int, ...]], bool] = {}
    thresholds: dict[int, float] = {}

    if "cell" in levels:
        thr = float(stats.chi2.ppf(alpha, 1))
        thresholds[1] = thr
        d = R * R / np.diag(C)
        for i in range(n):
            for j in range(p):
                flags[(i, (j,))] = bool(d[i, j] > thr)

    if "couple" in levels:
        thr = float(stats.chi2.ppf(alpha, 2))
        thresholds[2] = thr
        jj, ll = pair_arrays(p)
        cjj = C[jj, jj]
        cll = C[ll, ll]
        cjl = C[jj, ll]
        det = cjj * cll - cjl * cjl
        rj = R[:, jj]
        rl = R[:, ll]
        d2 = (cll * rj * rj - 2.0 * cjl * rj * rl + cjj * rl * rl) / det
        for i in range(n):
            for q, (j, l) in enumerate(zip(jj, ll)):
                flags[(i, (int(j), int(l)))] = bool(d2[i, q] > thr)

    if "row" in levels:
        thr = float(stats.chi2.ppf(alpha, p))
        thresholds[p] = thr
        sol = np.linalg.solve(C, R.T)
        dp = np.einsum("np,pn->n", R, sol)
        full = tuple(range(p))
        for i in range(n):
            flags[(i, full)] = bool(dp[i] > thr)

    return OutlierReport(alpha=alpha, thresholds=thresholds, flags=flags)


@dataclass
class BreakdownConstants:
    n: int
    b: float
    h: int
    hstar: int
    f: int
    bound_ccm: float
    bound_icm: float
    exact: bool
    per_pair_h: dict[PairIndex, int]
    per_pair_hstar: dict[PairIndex, int]


def _null_candidates(rows: np.ndarray, tol: float) -> list[np.ndarray]:
    # All near null directions of a small row set.
    if rows.size == 0:
        return []
    _, sv, vt = np.linalg.svd(rows, full_matrices=True)
    k = rows.shape[1]
    cands = []
    cut = tol * max(1.0, sv[0] if sv.size else 1.0)
    for r in range(k):
        if r >= sv.size or sv[r] <= cut:
            cands.append(vt[r])
    return cands


def _count_zeroed_units(XJ, XL, b, tol):
    sj = np.abs(XJ @ b)
    sl = np.abs(XL @ b)
    capj = tol * (1.0 + np.abs(XJ).sum(axis=1)) * np.abs(b).max()
    capl = tol * (1.0 + np.abs(XL).sum(axis=1)) * np.abs(b).max()
    return int(np.count_nonzero((sj <= capj) & (sl <= capl)))


def _pair_h(XJ, XL, budget, rng, tol):
    # Directions annihilating both covariate rows of as many units as
    # possible. Candidates come from null spaces of small row subsets.
    n, k = XJ.shape
    rows = np.vstack([XJ, XL])
    if k == 1:
        b = np.ones(1)
        return _count_zeroed_units(XJ, XL, b, tol), True
    size = k - 1
    total = math.comb(2 * n, size)
    exact = total <= budget
    if exact:
        subsets = combinations(range(2 * n), size)
    else:
        subsets = (rng.choice(2 * n, size=size, replace=False)
                   for _ in range(budget))
    best = 0
    for idx in subsets:
        for b in _null_candidates(rows[list(idx)], 1e-10):
            c = _count_zeroed_units(XJ, XL, b, tol)
            if c > best:
                best = c
    return best, exact


def _pair_hstar(XJ, XL, yj, yl, budget, rng, tol):
    # Largest number of units whose pair residuals can be made exactly
    # collinear: y_l - x_l b = t (y_j - x_j b) for a shared (t, b).
    # On a subset of k+1 units this is the generalized eigenproblem
    # [X_l | y_l] c = t [X_j | y_j] c with c proportional to (b, -1).
    n, k = XJ.shape
    m = k + 1
    scale = 1.0 + np.abs(yj) + np.abs(yl) + np.abs(XJ).sum(1) + np.abs(XL).sum(1)

    def count(t, b):
        rj = yj - XJ @ b
        rl = yl - XL @ b
        den = math.hypot(t, 1.0)
        val = np.abs(t * rj - rl) / den
        bn = 1.0 + np.abs(b).sum()
        return int(np.count_nonzero(val <= tol * scale * bn))

    def count_axis(rv, b):
        bn = 1.0 + np.abs(b).sum()
        return int(np.count_nonzero(np.abs(rv) <= tol * scale * bn))

    best = 0
    if n >= m:
        total = math.comb(n, m)
        exact = total <= budget
        if exact:
            subsets = combinations(range(n), m)
        else:
            subsets = (rng.choice(n, size=m, replace=False)
                       for _ in range(budget))
        for idx in subsets:
            idx = list(idx)
            M0 = np.column_stack([XL[idx], yl[idx]])
            M1 = np.column_stack([XJ[idx], yj[idx]])
            try:
                tv, cv = sla.eig(M0, M1, right=True)
            except (ValueError, np.linalg.LinAlgError):
                continue
            for t, c in zip(tv, cv.T):
                if not np.isfinite(t) or abs(t.imag) > 1e-8:
                    continue
                if abs(c[k]) <= 1e-12 * np.abs(c).max():
                    continue
                b = -(c[:k] / c[k]).real
                c2 = count(float(t.real), b)
                if c2 > best:
                    best = c2
    else:
        exact = True
    # Axis directions: one coordinate of the pair residual exactly zero.
    if n >= k:
        total = math.comb(n, k)
        if total <= budget:
            axis_subsets = list(combinations(range(n), k))
        else:
            axis_subsets = [tuple(rng.choice(n, size=k, replace=False))
                            for _ in range(budget)]
            exact = False
        for idx in axis_subsets:
            idx = list(idx)
            for X, yv, Xo, yo in ((XJ, yj, XL, yl), (XL, yl, XJ, yj)):
                A = X[idx]
                if abs(np.linalg.det(A)) < 1e-12 * max(1.0, np.abs(A).max() ** k):
                    continue
                b = np.linalg.solve(A, yv[idx])
                c2 = count_axis(yv - X @ b, b)
                if c2 > best:
                    best = c2
    return best, exact


def breakdown_constants(ds: Dataset, b: float = 0.5, budget: int = 20000,
                        seed: int = 0, tol: float = 1e-8,
                        ) -> BreakdownConstants:
    """Worst case exact fit counts of the pair designs and the implied
    replacement breakdown bounds.

    h is the largest number of units a single direction can annihilate
    in some pair design, hstar the largest number of units a projection
    of the pair residuals can fit exactly, f their sum. The bounds are
    min((1 - b) - f/n, b) for whole unit replacement and half that for
    independent cell replacement, clipped to [0, 1]. Enumeration is
    exact while the subset counts stay within budget per pair,
    otherwise a seeded random search gives a lower bound and the result
    is flagged approximate.
    """
    n, p = ds.n, ds.p
    if n < ds.k + 1:
        raise ValueError("need at least k + 1 units for the exact fit counts")
    rng = np.random.default_rng(seed)
    jj, ll = pair_arrays(p)
    h_map: dict[PairIndex, int] = {}
    hs_map: dict[PairIndex, int] = {}
    exact = True
    for j, l in zip(jj, ll):
        XJ = ds.x[:, j, :]
        XL = ds.x[:, l, :]
        hv, e1 = _pair_h(XJ, XL, budget, rng, tol)
        sv, e2 = _pair_hstar(XJ, XL, ds.y[:, j], ds.y[:, l], budget, rng, tol)
        h_map[PairIndex(int(j), int(l))] = hv
        hs_map[PairIndex(int(j), int(l))] = sv
        exact = exact and e1 and e2
    h = max(h_map.values())
    hstar = max(hs_map.values())
    f = h + hstar
    ccm = float(np.clip(min((1.0 - b) - f / n, b), 0.0, 1.0))
    icm = 0.5 * ccm
    return BreakdownConstants(n=n, b=b, h=h, hstar=hstar, f=f,
                              bound_ccm=ccm, bound_icm=icm, exact=exact,
                              per_pair_h=h_map, per_pair_hstar=hs_map)
