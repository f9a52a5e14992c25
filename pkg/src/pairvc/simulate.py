"""Monte Carlo harness: data generation, contamination, and metrics.

The default scenario is a two factor crossed design with replicates.
Contamination replaces either whole units or independent cells with
points shifted by omega at a leverage level lambda. All replications
derive their random streams from (seed, grid index, replication), so
different estimators see identical data and different grid points stay
independent.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .fit import FitConfig, FitResult, fit as fit_dispatch
from .initial import gamma_from_scatter, project_feasible
from .model import (Dataset, ModelSpec, Parameters, assemble_sigma,
                    build_crossed_design, shape_matrix)
from .simplex import minimize_simplex

X_NOISE_SD = 0.005


@dataclass(frozen=True)
class SimScenario:
    """Design, truth, and contamination settings for one study cell."""

    factors: tuple[int, int, int] = (2, 2, 3)
    n: int = 100
    k: int = 5
    beta: tuple[float, ...] = (0.0, 2.0, 2.0, 2.0, 2.0, 2.0)
    sigma_error: float = 1.0
    sigma_effects: tuple[float, ...] = (1.0, 1.0, 2.0)
    eps: float = 0.0
    mechanism: str = "ccm"
    leverage: float = 1.0
    omega: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len(self.beta) != self.k + 1:
            raise ValueError("beta must have k + 1 entries, intercept first")
        if self.mechanism not in ("ccm", "icm"):
            raise ValueError("mechanism must be 'ccm' or 'icm'")
        if not 0.0 <= self.eps < 0.5 + 1e-9:
            raise ValueError("eps must lie in [0, 0.5]")

    @property
    def p(self) -> int:
        F, G, H = self.factors
        return F * G * H

    def model_spec(self) -> ModelSpec:
        return ModelSpec(p=self.p, k=self.k + 1,
                         structures=tuple(build_crossed_design(*self.factors)))

    def truth(self) -> Parameters:
        gamma = np.asarray(self.sigma_effects) / self.sigma_error
        return Parameters(beta=np.asarray(self.beta), gamma=gamma,
                          eta=self.sigma_error)

    def true_sigma(self) -> np.ndarray:
        t = self.truth()
        return assemble_sigma(self.model_spec(), t.eta, t.gamma)


def gen_clean(scn: SimScenario, rng: np.random.Generator) -> Dataset:
    """Clean draw: standard normal covariates behind an intercept column,
    responses with the scenario covariance."""
    p = scn.p
    x = np.empty((scn.n, p, scn.k + 1))
    x[:, :, 0] = 1.0
    x[:, :, 1:] = rng.standard_normal((scn.n, p, scn.k))
    L = np.linalg.cholesky(scn.true_sigma())
    beta = np.asarray(scn.beta)
    y = x @ beta + rng.standard_normal((scn.n, p)) @ L.T
    return Dataset(y=y, x=x)


def _replacement_x(shape, leverage, rng):
    # Covariate block of replaced observations: tight around the
    # leverage level, intercept column untouched.
    return rng.normal(leverage, X_NOISE_SD, size=shape)


def contaminate_ccm(ds: Dataset, scn: SimScenario, omega: float,
                    rng: np.random.Generator) -> Dataset:
    """Replace round(n eps) whole units by shifted leverage points."""
    nbad = int(round(ds.n * scn.eps))
    if nbad == 0:
        return ds
    y = ds.y.copy()
    x = ds.x.copy()
    beta = np.asarray(scn.beta)
    S = scn.true_sigma()
    L = np.linalg.cholesky(S)
    units = rng.choice(ds.n, size=nbad, replace=False)
    for i in units:
        x[i, :, 1:] = _replacement_x((ds.p, scn.k), scn.leverage, rng)
        mean = x[i] @ beta + omega
        y[i] = mean + L @ rng.standard_normal(ds.p)
    return Dataset(y=y, x=x)


def contaminate_icm(ds: Dataset, scn: SimScenario, omega: float,
                    rng: np.random.Generator) -> Dataset:
    """Replace round(n p eps) independent cells by shifted leverage points.

    Each hit cell gets a fresh covariate row and a response drawn from
    that coordinate's marginal at mean shifted by omega.
    """
    ncells = int(round(ds.n * ds.p * scn.eps))
    if ncells == 0:
        return ds
    y = ds.y.copy()
    x = ds.x.copy()
    beta = np.asarray(scn.beta)
    sd = np.sqrt(np.diag(scn.true_sigma()))
    flat = rng.choice(ds.n * ds.p, size=ncells, replace=False)
    for f in flat:
        i, j = divmod(int(f), ds.p)
        x[i, j, 1:] = _replacement_x((scn.k,), scn.leverage, rng)
        y[i, j] = x[i, j] @ beta + omega + sd[j] * rng.standard_normal()
    return Dataset(y=y, x=x)


def contaminate(ds: Dataset, scn: SimScenario, omega: float,
                rng: np.random.Generator) -> Dataset:
    if scn.eps == 0:
        return ds
    f = contaminate_ccm if scn.mechanism == "ccm" else contaminate_icm
    return f(ds, scn, omega, rng)


def fit_gaussian_ml(ds: Dataset, spec: ModelSpec,
                    cfg: FitConfig | None = None) -> FitResult:
    """Gaussian maximum likelihood fit by alternating generalized least
    squares for beta with a simplex search over (gamma, log eta)."""
    cfg = cfg or FitConfig()
    n, p, k = ds.n, ds.p, ds.k
    X = ds.x.reshape(n * p, k)
    Y = ds.y.reshape(n * p)
    beta, *_ = np.linalg.lstsq(X, Y, rcond=None)
    R = ds.y - np.einsum("npk,k->np", ds.x, beta)
    Rc = R - R.mean(axis=0)
    gamma, eta = gamma_from_scatter(spec, (Rc.T @ Rc) / max(n - 1, 1))
    gamma = project_feasible(spec, gamma)
    eta = max(eta, 1e-8)

    def nll(b, g, e):
        C = shape_matrix(spec, g)
        try:
            cf = sla.cho_factor(C, lower=True)
        except np.linalg.LinAlgError:
            return np.inf
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0]))) + p * np.log(e)
        Rm = ds.y - np.einsum("npk,k->np", ds.x, b)
        quad = np.einsum("np,pn->n", Rm, sla.cho_solve(cf, Rm.T)).sum() / e
        return 0.5 * (n * logdet + quad)

    cur = nll(beta, gamma, eta)
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        C = shape_matrix(spec, gamma)
        cf = sla.cho_factor(C, lower=True)
        Cx = sla.cho_solve(cf, ds.x.transpose(1, 0, 2).reshape(p, -1))
        Cx = Cx.reshape(p, n, k).transpose(1, 0, 2)
        A = np.einsum("npk,npl->kl", ds.x, Cx)
        rhs = np.einsum("np,npk->k", ds.y, Cx)
        new_beta = np.linalg.solve(A, rhs)

        def fn(z):
            g, loge = z[:-1], z[-1]
            if abs(loge) > 50:
                return np.inf
            return nll(new_beta, g, float(np.exp(loge)))

        res = minimize_simplex(fn, np.append(gamma, np.log(eta)), cfg.simplex)
        new_gamma, new_logeta = res.x[:-1], res.x[-1]
        move = max(
            float(np.max(np.abs(new_beta - beta)) / (1.0 + np.max(np.abs(beta)))),
            float(np.max(np.abs(new_gamma - gamma)) / (1.0 + np.max(np.abs(gamma)))),
            abs(new_logeta - np.log(eta)) / (1.0 + abs(np.log(eta))))
        beta, gamma, eta, cur = new_beta, new_gamma, float(np.exp(new_logeta)), res.fval
        if move < cfg.tol:
            converged = True
            break

    return FitResult(estimator="gaussian_ml", beta=beta, gamma=gamma,
                     eta=eta, loss=cur, converged=converged, iterations=it,
                     pair_scales={}, trace=[])


def msmd(betas: np.ndarray, beta0: np.ndarray, A: np.ndarray) -> float:
    """Mean squared Mahalanobis distance of estimates to the truth."""
    B = np.atleast_2d(np.asarray(betas, dtype=float)) - np.asarray(beta0)
    return float(np.einsum("rk,kl,rl->r", B, A, B).mean())


def msmd_weight(sigma0: np.ndarray, dim: int) -> np.ndarray:
    """The default weight: trace of the inverse truth times the identity."""
    return np.trace(np.linalg.inv(sigma0)) * np.eye(dim)


def kld_terms(sigmas, sigma0: np.ndarray) -> np.ndarray:
    """Per replication Gaussian divergence to the truth, inf where the
    fitted covariance is not positive definite."""
    S0i = np.linalg.inv(sigma0)
    p = sigma0.shape[0]
    vals = []
    for S in sigmas:
        Q = S @ S0i
        sign, logdet = np.linalg.slogdet(Q)
        # Divergence is nonnegative; clip roundoff at equality.
        vals.append(np.inf if sign <= 0
                    else max(0.0, np.trace(Q) - logdet - p))
    return np.array(vals)


def mkld(sigmas, sigma0: np.ndarray) -> float:
    """Mean Kullback-Leibler divergence of fitted covariances to the
    truth. Replications without a positive definite fit are dropped;
    the result is inf only when none remain."""
    t = kld_terms(sigmas, sigma0)
    good = np.isfinite(t)
    if not np.any(good):
        return float("inf")
    return float(t[good].mean())


@dataclass
class StudyResult:
    scenario: SimScenario
    omega_grid: tuple[float, ...]
    reps: int
    estimators: tuple[str, ...]
    msmd: dict[str, np.ndarray]
    mkld: dict[str, np.ndarray]
    n_converged: dict[str, np.ndarray]
    n_dropped: dict[str, np.ndarray]

    def max_msmd(self, est: str) -> float:
        return float(np.max(self.msmd[est]))

    def max_mkld(self, est: str) -> float:
        return float(np.max(self.mkld[est]))

    def efficiency(self, est: str, baseline: str = "gaussian-ml",
                   point: int = 0) -> dict[str, float]:
        """Relative efficiency of est against the baseline at one grid point."""
        return {
            "msmd": float(self.msmd[baseline][point] / self.msmd[est][point]),
            "mkld": float(self.mkld[baseline][point] / self.mkld[est][point]),
        }


def _rep_estimates(scn: SimScenario, widx: int, omega: float, rep: int,
                   estimators: tuple[str, ...], cfg: FitConfig):
    rng = np.random.default_rng([scn.seed, widx, rep])
    spec = scn.model_spec()
    clean = gen_clean(scn, rng)
    data = contaminate(clean, scn, omega, rng)
    out = {}
    for est in estimators:
        r = fit_dispatch(data, spec, est, cfg)
        out[est] = (r.beta, r.gamma, r.eta, r.converged)
    return out


def run_study(scn: SimScenario, reps: int = 100,
              omega_grid: tuple[float, ...] | None = None,
              estimators: tuple[str, ...] = ("gaussian-ml", "composite-tau"),
              cfg: FitConfig | None = None, refine: bool = False,
              threads: int = 1) -> StudyResult:
    """Run the study grid and aggregate the two metrics per estimator.

    With refine=True a second pass evaluates half steps around the grid
    argmax of the first estimator's distance metric and extends the grid.
    """
    if reps < 1:
        raise ValueError("need at least one replication")
    cfg = cfg or FitConfig()
    grid = tuple(float(w) for w in (omega_grid if omega_grid is not None
                                    else [scn.omega]))
    spec = scn.model_spec()
    S0 = scn.true_sigma()
    truth = scn.truth()
    A = msmd_weight(S0, truth.beta.size)

    def run_grid(points, base_index):
        jobs = [(scn, base_index + wi, w, r, estimators, cfg)
                for wi, w in enumerate(points) for r in range(reps)]
        if threads == 1:
            results = [_rep_estimates(*j) for j in jobs]
        else:
            workers = threads if threads > 0 else None
            with ProcessPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(_rep_estimates, *zip(*jobs),
                                      chunksize=max(1, len(jobs) // 64)))
        per_point = {}
        for (widx, w), chunk in zip(
                ((base_index + wi, w) for wi, w in enumerate(points)),
                np.split(np.arange(len(jobs)), len(points))):
            per_point[w] = [results[i] for i in chunk]
        return per_point

    collected = run_grid(grid, 0)
    if refine and len(grid) > 1:
        first = estimators[0]
        cur_msmd = []
        for w in grid:
            B = np.array([rep[first][0] for rep in collected[w]])
            cur_msmd.append(msmd(B, truth.beta, A))
        wstar = grid[int(np.argmax(cur_msmd))]
        extra = [w for w in (wstar - 0.5, wstar + 0.5)
                 if w > 0 and w not in grid]
        if extra:
            collected.update(run_grid(tuple(extra), len(grid)))
            grid = tuple(sorted([*grid, *extra]))

    m_out = {e: np.empty(len(grid)) for e in estimators}
    k_out = {e: np.empty(len(grid)) for e in estimators}
    c_out = {e: np.zeros(len(grid)) for e in estimators}
    d_out = {e: np.zeros(len(grid), dtype=int) for e in estimators}
    for wi, w in enumerate(grid):
        chunk = collected[w]
        for est in estimators:
            B = np.array([rep[est][0] for rep in chunk])
            sigmas = [assemble_sigma(spec, rep[est][2], rep[est][1])
                      if rep[est][2] > 0 else np.zeros_like(S0)
                      for rep in chunk]
            terms = kld_terms(sigmas, S0)
            good = np.isfinite(terms)
            m_out[est][wi] = msmd(B, truth.beta, A)
            k_out[est][wi] = float(terms[good].mean()) if np.any(good) \
                else float("inf")
            c_out[est][wi] = np.mean([rep[est][3] for rep in chunk])
            d_out[est][wi] = int(np.count_nonzero(~good))
    return StudyResult(scenario=scn, omega_grid=grid, reps=reps,
                       estimators=tuple(estimators), msmd=m_out, mkld=k_out,
                       n_converged=c_out, n_dropped=d_out)
