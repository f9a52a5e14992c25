"""Pairwise composite objectives, their scales, and analytic gradients.

Everything is vectorized across the p(p-1)/2 coordinate pairs. For a
candidate (beta, gamma) the squared pair distances form an n x npairs
matrix; each column gets an M-scale (solved for all columns at once by
bisection on sorted values with prefix sums, so one bisection step costs
two rank filters instead of a full loss evaluation) and optionally the
tau refinement. Gradients follow the implicit differentiation of the
scale equations: the per point weights combine the scale weights with
the second loss weights, and both the beta system and the structure
weight gradient collapse to small einsums.
"""

from __future__ import annotations

import numpy as np

from .model import Dataset, ModelSpec, pair_arrays, shape_matrix
from .scales import (_HI, _LO, _NORM, RhoConfig, ScaleResult, mscale,
                     rho_opt_sq, weight)

_BISECT_REL = 1e-14
_HUGE = 1e60


class PairWorkspace:
    """Precomputed pair bookkeeping for one dataset and structure set.

    Caches the covariate pair slices and the structure matrix entries at
    the pair positions, plus the residual products of the most recent
    beta, which the gamma search reuses across many objective calls.
    """

    def __init__(self, ds: Dataset, spec: ModelSpec):
        if ds.p != spec.p or ds.k != spec.k:
            raise ValueError("dataset and model spec disagree on dimensions")
        self.ds = ds
        self.spec = spec
        self.n, self.p, self.k = ds.n, ds.p, ds.k
        self.jj, self.ll = pair_arrays(self.p)
        self.npairs = self.jj.size
        self.XJ = np.ascontiguousarray(ds.x[:, self.jj, :])
        self.XL = np.ascontiguousarray(ds.x[:, self.ll, :])
        self.YJ = np.ascontiguousarray(ds.y[:, self.jj])
        self.YL = np.ascontiguousarray(ds.y[:, self.ll])
        self.vjj = np.array([V[self.jj, self.jj] for V in spec.structures])
        self.vll = np.array([V[self.ll, self.ll] for V in spec.structures])
        self.vjl = np.array([V[self.jj, self.ll] for V in spec.structures])
        self._beta_cache = None
        self._products = None

    def sigma_parts(self, gamma):
        """Pair entries (s_jj, s_ll, s_jl) and determinants of I + sum g V."""
        gamma = np.asarray(gamma, dtype=float).ravel()
        sjj = 1.0 + gamma @ self.vjj
        sll = 1.0 + gamma @ self.vll
        sjl = gamma @ self.vjl
        det = sjj * sll - sjl * sjl
        return sjj, sll, sjl, det

    def residuals(self, beta):
        R = self.ds.y - np.einsum("npk,k->np", self.ds.x, beta)
        return R

    def residual_products(self, beta):
        """(RJ^2, RJ RL, RL^2) for the pair slices, cached on beta."""
        beta = np.asarray(beta, dtype=float).ravel()
        if self._beta_cache is not None and np.array_equal(beta, self._beta_cache):
            return self._products
        R = self.residuals(beta)
        rj = R[:, self.jj]
        rl = R[:, self.ll]
        self._beta_cache = beta.copy()
        self._products = (rj * rj, rj * rl, rl * rl, rj, rl)
        return self._products


def pair_distances(ws: PairWorkspace, beta, gamma, normalized: bool = True):
    """Squared pair distances, n x npairs, plus the sigma parts used."""
    rj2, rjl, rl2, _, _ = ws.residual_products(beta)
    sjj, sll, sjl, det = ws.sigma_parts(gamma)
    if np.any(det <= 0):
        raise ValueError("gamma gives a non positive definite pair block")
    quad = sll * rj2 - 2.0 * sjl * rjl + sjj * rl2
    M = quad / (np.sqrt(det) if normalized else det)
    return M, (sjj, sll, sjl, det)


def _col_mscale(M: np.ndarray, c: float, b: float):
    """Columnwise M-scale of a nonnegative matrix, bisection on all columns.

    Returns (s, degenerate) where degenerate marks columns whose zero
    fraction reaches 1 - b; those get s = 0.
    """
    n, m = M.shape
    c2 = c * c
    nzero = (M == 0.0).sum(axis=0)
    degen = nzero / n >= 1.0 - b
    if degen.any():
        M = np.where(degen, 1.0, M)

    if float(M.max(initial=0.0)) > _HUGE:
        fmean = _make_fmean_direct(M, c, n)
    else:
        fmean = _make_fmean_sorted(M, c2, n)

    minpos = np.where(M > 0, M, np.inf).min(axis=0)
    lo = minpos / (_HI * c2)
    hi = np.maximum(M.mean(axis=0) / (2.0 * _NORM * c2 * b), 2.0 * lo)
    for _ in range(80):
        bad = fmean(lo) <= b
        if not bad.any():
            break
        lo = np.where(bad, 0.5 * lo, lo)
    for _ in range(80):
        bad = fmean(hi) > b
        if not bad.any():
            break
        hi = np.where(bad, 2.0 * hi, hi)
    # Illinois iteration on g(s) = fmean(s) - b, which is decreasing in
    # s, with a geometric midpoint fallback whenever the secant proposal
    # leaves the bracket. An exact g = 0 collapses the bracket on the
    # spot; leaving it on one side would zero that endpoint's g and the
    # secant would stall at factor-two steps for the rest of the run.
    glo = fmean(lo) - b
    ghi = fmean(hi) - b
    lo_last = np.zeros(m, dtype=bool)
    hi_last = np.zeros(m, dtype=bool)
    for _ in range(200):
        act = (hi - lo) > _BISECT_REL * hi
        if not act.any():
            break
        den = ghi - glo
        with np.errstate(divide="ignore", invalid="ignore"):
            prop = (lo * ghi - hi * glo) / den
        gmid = np.sqrt(lo) * np.sqrt(hi)
        prop = np.where(np.isfinite(prop) & (prop > lo) & (prop < hi),
                        prop, gmid)
        gv = fmean(prop) - b
        hit = act & (gv == 0.0)
        pos = act & (gv > 0.0)
        neg = act & ~pos & ~hit
        ghi = np.where(pos & lo_last, 0.5 * ghi, ghi)
        glo = np.where(neg & hi_last, 0.5 * glo, glo)
        lo = np.where(pos | hit, prop, lo)
        glo = np.where(pos, gv, glo)
        hi = np.where(neg | hit, prop, hi)
        ghi = np.where(neg, gv, ghi)
        lo_last, hi_last = pos, neg
    s = np.sqrt(lo) * np.sqrt(hi)
    if degen.any():
        s = np.where(degen, 0.0, s)
    return s, degen


def _make_fmean_sorted(M, c2, n):
    # Exact mean of rho_opt_sq(M / s) per column from sorted prefix sums:
    # a rank filter locates the two join points, the linear part comes
    # from the first power sum, the band from power sums up to four.
    Ms = np.sort(M, axis=0)
    z = np.zeros((1, M.shape[1]))
    M2 = Ms * Ms
    P1 = np.vstack([z, np.cumsum(Ms, axis=0)])
    P2 = np.vstack([z, np.cumsum(M2, axis=0)])
    P3 = np.vstack([z, np.cumsum(M2 * Ms, axis=0)])
    P4 = np.vstack([z, np.cumsum(M2 * M2, axis=0)])
    cols = np.arange(M.shape[1])

    def fmean(s):
        n1 = (Ms <= (_LO * c2) * s).sum(axis=0)
        n2 = (Ms <= (_HI * c2) * s).sum(axis=0)
        S1 = P1[n1, cols]
        d1 = P1[n2, cols] - S1
        d2 = P2[n2, cols] - P2[n1, cols]
        d3 = P3[n2, cols] - P3[n1, cols]
        d4 = P4[n2, cols] - P4[n1, cols]
        inv = 1.0 / (s * c2)
        lin = S1 * inv / (2.0 * _NORM)
        band = ((0.016 / 8.0) * d4 * inv**4 + (-0.312 / 6.0) * d3 * inv**3
                + (1.728 / 4.0) * d2 * inv**2 + (-1.944 / 2.0) * d1 * inv
                + 1.792 * (n2 - n1)) / _NORM
        return (lin + band + (n - n2)) / n

    return fmean


def _make_fmean_direct(M, c, n):
    def fmean(s):
        return rho_opt_sq(M / s, c).mean(axis=0)

    return fmean


def pair_scales(ws: PairWorkspace, beta, gamma, cfg: RhoConfig):
    """Per pair M-scales and tau-scales at (beta, gamma).

    Returns (s, tau, M, degenerate). Degenerate pairs carry zero scales.
    """
    M, _ = pair_distances(ws, beta, gamma)
    s, degen = _col_mscale(M, cfg.c1, cfg.b)
    safe = np.where(degen, 1.0, s)
    tau = safe * rho_opt_sq(M / safe, cfg.c2).mean(axis=0)
    tau = np.where(degen, 0.0, tau)
    return s, tau, M, degen


def loss_tau(ws: PairWorkspace, beta, gamma, cfg: RhoConfig) -> float:
    """Sum of the pair tau-scales, the composite tau objective."""
    _, tau, _, _ = pair_scales(ws, beta, gamma, cfg)
    return float(tau.sum())


def loss_S(ws: PairWorkspace, beta, gamma, cfg: RhoConfig) -> float:
    """Sum of the pair M-scales, the composite S objective."""
    M, _ = pair_distances(ws, beta, gamma)
    s, _ = _col_mscale(M, cfg.c1, cfg.b)
    return float(s.sum())


def tilde_weights(M, s, degen, cfg: RhoConfig, objective: str = "tau"):
    """Per point weights of the estimating equations at frozen scales.

    For the tau objective these are (A2 - B2) Wdot1 + W2 with Wdot1 the
    normalized scale weight; for the S objective just Wdot1. Degenerate
    pairs get zero weight.
    """
    safe = np.where(degen, 1.0, s)
    # Clip so that zero weights times huge distances cannot produce nan.
    u = np.minimum(M / safe, 1e300)
    w1 = weight(u, cfg.c1)
    denom = (w1 * u).mean(axis=0)
    bad = degen | (denom <= 0)
    wdot1 = w1 / np.where(bad, 1.0, denom)
    if objective == "s":
        wt = wdot1
    elif objective == "tau":
        w2 = weight(u, cfg.c2)
        a2 = rho_opt_sq(u, cfg.c2).mean(axis=0)
        b2 = (w2 * u).mean(axis=0)
        wt = (a2 - b2) * wdot1 + w2
    else:
        raise ValueError("objective must be 'tau' or 's'")
    if bad.any():
        wt = np.where(bad, 0.0, wt)
    return wt


def _inv_block_parts(parts):
    # Entries of the inverse of each normalized pair block: for a block
    # with determinant d, inv(B / sqrt(d)) = adj(B) / sqrt(d).
    sjj, sll, sjl, det = parts
    rd = np.sqrt(det)
    return sll / rd, -sjl / rd, sjj / rd


def grad_beta(ws: PairWorkspace, beta, gamma, cfg: RhoConfig,
              objective: str = "tau") -> np.ndarray:
    """Analytic gradient of the composite objective in beta."""
    beta = np.asarray(beta, dtype=float).ravel()
    M, parts = pair_distances(ws, beta, gamma)
    s, degen = _col_mscale(M, cfg.c1, cfg.b)
    wt = tilde_weights(M, s, degen, cfg, objective)
    a11, a12, a22 = _inv_block_parts(parts)
    _, _, _, rj, rl = ws.residual_products(beta)
    cj = wt * (a11 * rj + a12 * rl)
    cl = wt * (a12 * rj + a22 * rl)
    g = np.einsum("np,npk->k", cj, ws.XJ) + np.einsum("np,npk->k", cl, ws.XL)
    return (-2.0 / ws.n) * g


def beta_system(ws: PairWorkspace, beta, gamma, cfg: RhoConfig,
                objective: str = "tau"):
    """Weighted least squares system whose solution is the beta update.

    The system matrix is sum w x' inv(Sstar) x over points and pairs and
    the right side is the same with y in place of x beta, so the current
    beta solves it exactly when the gradient vanishes.
    """
    M, parts = pair_distances(ws, beta, gamma)
    s, degen = _col_mscale(M, cfg.c1, cfg.b)
    wt = tilde_weights(M, s, degen, cfg, objective)
    a11, a12, a22 = _inv_block_parts(parts)
    wa = wt * a11
    wb = wt * a12
    wc = wt * a22
    A = np.einsum("np,npk,npl->kl", wa, ws.XJ, ws.XJ)
    A += np.einsum("np,npk,npl->kl", wb, ws.XJ, ws.XL)
    A += np.einsum("np,npk,npl->kl", wb, ws.XL, ws.XJ)
    A += np.einsum("np,npk,npl->kl", wc, ws.XL, ws.XL)
    rhs = np.einsum("np,npk->k", wa * ws.YJ + wb * ws.YL, ws.XJ)
    rhs += np.einsum("np,npk->k", wb * ws.YJ + wc * ws.YL, ws.XL)
    return A, rhs


def grad_gamma(ws: PairWorkspace, beta, gamma, cfg: RhoConfig,
               objective: str = "tau") -> np.ndarray:
    """Analytic gradient of the composite objective in gamma.

    Uses the adjugate form of the derivative of each normalized inverse
    block, which stays valid for singular structure blocks.
    """
    beta = np.asarray(beta, dtype=float).ravel()
    M, parts = pair_distances(ws, beta, gamma)
    s, degen = _col_mscale(M, cfg.c1, cfg.b)
    wt = tilde_weights(M, s, degen, cfg, objective)
    sjj, sll, sjl, det = parts
    rj2, rjl, rl2, _, _ = ws.residual_products(beta)
    g = wt / np.sqrt(det)
    t1 = (g * rj2).sum(axis=0)
    t2 = (g * rjl).sum(axis=0)
    t3 = (g * rl2).sum(axis=0)
    out = np.empty(ws.spec.n_structures)
    for r in range(ws.spec.n_structures):
        vjj = ws.vjj[r]
        vll = ws.vll[r]
        vjl = ws.vjl[r]
        cr = 0.5 * vjj * sll + 0.5 * vll * sjj - vjl * sjl
        b11 = vll - cr * sll / det
        b12 = -(vjl - cr * sjl / det)
        b22 = vjj - cr * sjj / det
        out[r] = np.sum(b11 * t1 + 2.0 * b12 * t2 + b22 * t3)
    return out / ws.n


def gamma_objective(ws: PairWorkspace, beta, cfg: RhoConfig,
                    objective: str = "tau"):
    """Closure gamma -> loss at fixed beta, +inf outside the feasible set."""
    beta = np.asarray(beta, dtype=float).ravel()
    ws.residual_products(beta)
    lf = loss_tau if objective == "tau" else loss_S

    def fn(gamma):
        S = shape_matrix(ws.spec, gamma)
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            return np.inf
        return lf(ws, beta, gamma, cfg)

    return fn


def solve_eta(ws: PairWorkspace, beta, gamma, cfg: RhoConfig) -> ScaleResult:
    """Error variance from the pooled unnormalized pair distances.

    Solves the M-scale equation over all n p(p-1)/2 distances computed
    with the raw (not determinant scaled) pair blocks at (1, gamma).
    """
    M, _ = pair_distances(ws, beta, gamma, normalized=False)
    return mscale(M.ravel(), cfg.c1, cfg.b)
