"""Composite tau, composite S, and classical S fits.

All three share the same outer loop: freeze the scale quantities, take a
weighted least squares step in beta (halving back toward the previous
point if the objective would increase), minimize over the structure
weights with a simplex search that treats infeasible points as +inf,
then update the error variance from its own scale equation. Iteration
stops when neither beta nor gamma moves in relative terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg as sla

from .initial import initial_estimates, project_feasible
from .model import (Dataset, ModelSpec, PairIndex, Parameters, pair_list,
                    shape_matrix)
from .objective import (PairWorkspace, beta_system, gamma_objective, loss_S,
                        loss_tau, pair_scales, solve_eta)
from .scales import (RhoConfig, consistency_b, cutoff_for_rejection, mscale,
                     reference_pair_scale, weight)
from .simplex import SimplexOptions, SimplexResult, minimize_simplex


@dataclass(frozen=True)
class FitConfig:
    rho: RhoConfig = field(default_factory=RhoConfig)
    tol: float = 1e-6
    max_iter: int = 200
    simplex: SimplexOptions = field(default_factory=lambda: SimplexOptions(
        step=0.2, max_evals=300, xtol=1e-8, ftol=1e-11))
    backtrack_max: int = 20
    seed: int = 0
    # Classical S tuning: explicit cutoff wins, otherwise the cutoff is
    # placed so a clean Gaussian point is rejected with this probability.
    classical_cutoff: float | None = None
    classical_rejection: float = 0.01

    def calibrated(self) -> "FitConfig":
        return replace(self, rho=self.rho.calibrated())


@dataclass
class FitResult:
    estimator: str
    beta: np.ndarray
    gamma: np.ndarray
    eta: float
    loss: float
    converged: bool
    iterations: int
    pair_scales: dict[PairIndex, tuple[float, float]]
    scale: float | None = None
    eta_degenerate: bool = False
    trace: list[tuple[int, float, np.ndarray, np.ndarray]] = field(
        default_factory=list)
    message: str = ""

    @property
    def parameters(self) -> Parameters:
        return Parameters(self.beta, self.gamma, self.eta)


def beta_step(ws: PairWorkspace, beta, gamma, rho: RhoConfig,
              objective: str = "tau") -> np.ndarray:
    """One fixed point update of beta at frozen scales."""
    A, rhs = beta_system(ws, beta, gamma, rho, objective)
    try:
        return np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        return np.asarray(beta, dtype=float).copy()


def gamma_step(ws: PairWorkspace, beta, gamma, rho: RhoConfig,
               objective: str = "tau",
               options: SimplexOptions | None = None) -> SimplexResult:
    """Simplex descent over gamma at fixed beta, never worse than the start."""
    fn = gamma_objective(ws, beta, rho, objective)
    gamma = np.asarray(gamma, dtype=float)
    if gamma.size == 0:
        return SimplexResult(x=gamma, fval=fn(gamma), n_evals=1,
                             converged=True)
    return minimize_simplex(fn, gamma, options)


def _backtrack(loss_fn, beta_old, beta_new, cur, max_halvings):
    # Halve toward the previous point until the objective stops increasing.
    step = np.asarray(beta_new, dtype=float) - beta_old
    t = 1.0
    for _ in range(max_halvings):
        cand = beta_old + t * step
        val = loss_fn(cand)
        if val <= cur:
            return cand, val
        t *= 0.5
    return beta_old.copy(), cur


def _rel_change(new, old):
    new = np.asarray(new, dtype=float)
    old = np.asarray(old, dtype=float)
    if new.size == 0:
        return 0.0
    return float(np.max(np.abs(new - old)) / (1.0 + np.max(np.abs(old))))


def _fit_composite(ds: Dataset, spec: ModelSpec, cfg: FitConfig,
                   objective: str, start: Parameters | None) -> FitResult:
    ws = PairWorkspace(ds, spec)
    if start is None:
        start = initial_estimates(ds, spec, cfg.rho, cfg.seed)
    beta = np.asarray(start.beta, dtype=float).copy()
    gamma = project_feasible(spec, np.asarray(start.gamma, dtype=float))
    lf = loss_tau if objective == "tau" else loss_S

    def lfun(b, g=None):
        return lf(ws, b, gamma if g is None else g, cfg.rho)

    cur = lfun(beta)
    trace = [(0, cur, beta.copy(), gamma.copy())]
    converged = False
    it = 0
    eta = 1.0
    eta_degen = False
    # The pooled pair scale estimates eta times the bivariate reference
    # scale; dividing restores the error variance under any (c1, b).
    eta_ref = reference_pair_scale(cfg.rho.c1, cfg.rho.b)
    for it in range(1, cfg.max_iter + 1):
        prop = beta_step(ws, beta, gamma, cfg.rho, objective)
        new_beta, cur = _backtrack(lfun, beta, prop, cur, cfg.backtrack_max)
        gres = gamma_step(ws, new_beta, gamma, cfg.rho, objective, cfg.simplex)
        new_gamma, cur = gres.x, gres.fval
        er = solve_eta(ws, new_beta, new_gamma, cfg.rho)
        eta, eta_degen = er.value / eta_ref, er.degenerate
        move = max(_rel_change(new_beta, beta), _rel_change(new_gamma, gamma))
        beta, gamma = new_beta, new_gamma
        trace.append((it, cur, beta.copy(), gamma.copy()))
        if move < cfg.tol:
            converged = True
            break

    s, tau, _, _ = pair_scales(ws, beta, gamma, cfg.rho)
    scales_map = {pr: (float(s[i]), float(tau[i]))
                  for i, pr in enumerate(pair_list(ds.p))}
    name = "composite_tau" if objective == "tau" else "composite_s"
    return FitResult(
        estimator=name, beta=beta, gamma=gamma, eta=eta, loss=cur,
        converged=converged, iterations=it, pair_scales=scales_map,
        eta_degenerate=eta_degen, trace=trace)


def fit_composite_tau(ds: Dataset, spec: ModelSpec,
                      cfg: FitConfig | None = None,
                      start: Parameters | None = None) -> FitResult:
    """Composite tau-estimator of (beta, gamma, eta)."""
    return _fit_composite(ds, spec, cfg or FitConfig(), "tau", start)


def fit_composite_S(ds: Dataset, spec: ModelSpec,
                    cfg: FitConfig | None = None,
                    start: Parameters | None = None) -> FitResult:
    """Composite S-estimator, the tau machinery without the second loss."""
    return _fit_composite(ds, spec, cfg or FitConfig(), "s", start)


def _full_distances(ds: Dataset, spec: ModelSpec, beta, gamma):
    # Squared full vector distances under the determinant normalized shape.
    C = shape_matrix(spec, gamma)
    cf = sla.cho_factor(C, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    R = ds.y - np.einsum("npk,k->np", ds.x, beta)
    sol = sla.cho_solve(cf, R.T)
    quad = np.einsum("np,pn->n", R, sol)
    return np.exp(logdet / ds.p) * quad, cf


def fit_classical_S(ds: Dataset, spec: ModelSpec,
                    cfg: FitConfig | None = None,
                    start: Parameters | None = None) -> FitResult:
    """Full vector S-estimator used as the non composite baseline.

    Minimizes the single M-scale of the p dimensional distances under
    the determinant normalized shape; the consistency level is the
    Gaussian expectation of the loss at dimension p.
    """
    cfg = cfg or FitConfig()
    c_full = cfg.classical_cutoff
    if c_full is None:
        c_full = cutoff_for_rejection(ds.p, cfg.classical_rejection)
    b_full = consistency_b(c_full, ds.p)
    if start is None:
        start = initial_estimates(ds, spec, cfg.rho, cfg.seed)
    beta = np.asarray(start.beta, dtype=float).copy()
    gamma = project_feasible(spec, np.asarray(start.gamma, dtype=float))

    def scale_at(b, g):
        m, _ = _full_distances(ds, spec, b, g)
        return mscale(m, c_full, b_full).value

    def gamma_fn(b):
        def fn(g):
            try:
                np.linalg.cholesky(shape_matrix(spec, g))
            except np.linalg.LinAlgError:
                return np.inf
            return scale_at(b, g)
        return fn

    cur = scale_at(beta, gamma)
    trace = [(0, cur, beta.copy(), gamma.copy())]
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        m, cf = _full_distances(ds, spec, beta, gamma)
        s = mscale(m, c_full, b_full)
        if s.degenerate or s.value <= 0:
            break
        w = weight(m / s.value, c_full)
        # Weighted GLS system: sum_i w_i x_i' C^{-1} (y_i - x_i beta) = 0.
        Cx = sla.cho_solve(cf, ds.x.transpose(1, 0, 2).reshape(ds.p, -1))
        Cx = Cx.reshape(ds.p, ds.n, ds.k).transpose(1, 0, 2)
        A = np.einsum("n,npk,npl->kl", w, ds.x, Cx)
        rhs = np.einsum("n,np,npk->k", w, ds.y, Cx)
        try:
            prop = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            prop = beta
        new_beta, cur = _backtrack(lambda b: scale_at(b, gamma),
                                   beta, prop, cur, cfg.backtrack_max)
        if gamma.size:
            gres = minimize_simplex(gamma_fn(new_beta), gamma, cfg.simplex)
            new_gamma, cur = gres.x, gres.fval
        else:
            new_gamma = gamma
        move = max(_rel_change(new_beta, beta), _rel_change(new_gamma, gamma))
        beta, gamma = new_beta, new_gamma
        trace.append((it, cur, beta.copy(), gamma.copy()))
        if move < cfg.tol:
            converged = True
            break

    C = shape_matrix(spec, gamma)
    R = ds.y - np.einsum("npk,k->np", ds.x, beta)
    d = np.einsum("np,pn->n", R, np.linalg.solve(C, R.T))
    er = mscale(d, c_full, b_full)
    ws = PairWorkspace(ds, spec)
    s_arr, tau_arr, _, _ = pair_scales(ws, beta, gamma, cfg.rho)
    scales_map = {pr: (float(s_arr[i]), float(tau_arr[i]))
                  for i, pr in enumerate(pair_list(ds.p))}
    return FitResult(
        estimator="classical_s", beta=beta, gamma=gamma, eta=er.value,
        loss=cur, converged=converged, iterations=it,
        pair_scales=scales_map, scale=cur, eta_degenerate=er.degenerate,
        trace=trace)


_FITTERS = {
    "composite-tau": fit_composite_tau,
    "composite-s": fit_composite_S,
    "classical-s": fit_classical_S,
}


def fit(ds: Dataset, spec: ModelSpec, estimator: str = "composite-tau",
        cfg: FitConfig | None = None,
        start: Parameters | None = None) -> FitResult:
    """Dispatch on the estimator name used by the command line."""
    if estimator == "gaussian-ml":
        from .simulate import fit_gaussian_ml
        return fit_gaussian_ml(ds, spec, cfg)
    try:
        f = _FITTERS[estimator]
    except KeyError:
        raise ValueError(f"unknown estimator {estimator!r}")
    return f(ds, spec, cfg, start)
