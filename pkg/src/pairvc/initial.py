"""Starting values for the composite fits.

The regression start comes from an S-estimator on the stacked
coordinates: elemental subsets give exact fit candidates, the candidate
with the smallest residual M-scale wins, and a few reweighting passes
polish it. The structure weights come from a pairwise robust scatter of
the residuals regressed on the structure patterns. Both are
deterministic for a given seed.
"""

from __future__ import annotations

import numpy as np

from .model import Dataset, ModelSpec, Parameters, feasible
from .scales import RhoConfig, mscale, weight

N_CANDIDATES = 500
N_SCREEN = 100
N_REWEIGHT = 3
MAD_FACTOR = 1.4826


def _stacked(ds: Dataset):
    N = ds.n * ds.p
    return ds.x.reshape(N, ds.k), ds.y.reshape(N)


def _candidate_betas(X, y, k, rng):
    # Exact fits on random elemental subsets; singular draws are dropped.
    N = X.shape[0]
    out = []
    for _ in range(N_CANDIDATES):
        idx = rng.choice(N, size=k, replace=False)
        A = X[idx]
        if abs(np.linalg.det(A)) < 1e-12 * max(1.0, np.abs(A).max() ** k):
            continue
        out.append(np.linalg.solve(A, y[idx]))
    return np.array(out)


def _s_regression(X, y, rho: RhoConfig, rng):
    N, k = X.shape
    B = _candidate_betas(X, y, k, rng)
    if B.size == 0:
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        return beta
    resid = y[:, None] - X @ B.T
    # Cheap screen by median absolute residual, then the real M-scale.
    med = np.median(np.abs(resid), axis=0)
    keep = np.argsort(med, kind="stable")[:N_SCREEN]
    best, best_s = None, np.inf
    for i in keep:
        s = mscale(resid[:, i] ** 2, rho.c1, rho.b)
        if not s.degenerate and s.value < best_s:
            best, best_s = B[i], s.value
    if best is None:
        best = B[int(np.argmin(med))]
    beta = best.copy()
    # Polish with the wide loss at the tight S-scale, MM style: the
    # scale keeps the breakdown point, the weights buy back efficiency.
    for _ in range(N_REWEIGHT):
        r2 = (y - X @ beta) ** 2
        s = mscale(r2, rho.c1, rho.b)
        if s.degenerate or s.value <= 0:
            break
        w = weight(r2 / s.value, rho.c2)
        if not np.any(w > 0):
            break
        Xw = X * w[:, None]
        A = Xw.T @ X
        try:
            beta = np.linalg.solve(A, Xw.T @ y)
        except np.linalg.LinAlgError:
            break
    return beta


def _mad_scale(v):
    return MAD_FACTOR * np.median(np.abs(v - np.median(v)))


def pairwise_scatter(R: np.ndarray) -> np.ndarray:
    """Robust scatter from coordinatewise medians and pair sums.

    Diagonal entries are squared MAD scales; off diagonal entries use
    the quarter difference of the squared scales of the sum and the
    difference. Symmetric but not necessarily positive definite.
    """
    p = R.shape[1]
    S = np.empty((p, p))
    for j in range(p):
        S[j, j] = _mad_scale(R[:, j]) ** 2
    for j in range(p):
        for l in range(j + 1, p):
            sp = _mad_scale(R[:, j] + R[:, l])
            sm = _mad_scale(R[:, j] - R[:, l])
            S[j, l] = S[l, j] = 0.25 * (sp * sp - sm * sm)
    return S


def gamma_from_scatter(spec: ModelSpec, scatter: np.ndarray):
    """Least squares read off of the structure weights from a scatter.

    Regresses the lower triangle of the scatter on the identity pattern
    and the structure patterns; the structure coefficients divided by the
    identity coefficient give gamma, the identity coefficient is eta.
    """
    p = spec.p
    rows, cols = np.tril_indices(p)
    t = scatter[rows, cols]
    D = np.column_stack(
        [np.eye(p)[rows, cols]] + [V[rows, cols] for V in spec.structures])
    coef, *_ = np.linalg.lstsq(D, t, rcond=None)
    eta = coef[0]
    floor = 1e-8 * max(np.mean(np.diag(scatter)), 1e-8)
    if eta < floor:
        eta = floor
    return coef[1:] / eta, float(eta)


def project_feasible(spec: ModelSpec, gamma: np.ndarray,
                     margin: float = 1e-6) -> np.ndarray:
    """Shrink gamma toward zero until I + sum gamma V is comfortably PD.

    The feasible set is star shaped around the origin, so radial
    shrinkage always terminates.
    """
    gamma = np.asarray(gamma, dtype=float).ravel()
    for _ in range(60):
        if feasible(spec, gamma * (1.0 + margin)):
            return gamma
        gamma = 0.5 * gamma
    return np.zeros_like(gamma)


def initial_estimates(ds: Dataset, spec: ModelSpec, rho: RhoConfig,
                      seed: int = 0) -> Parameters:
    """Robust starting point (beta, gamma, eta) for the composite fits."""
    rng = np.random.default_rng(seed)
    X, y = _stacked(ds)
    beta0 = _s_regression(X, y, rho, rng)
    R = ds.y - np.einsum("npk,k->np", ds.x, beta0)
    gamma0, eta0 = gamma_from_scatter(spec, pairwise_scatter(R))
    gamma0 = project_feasible(spec, gamma0)
    return Parameters(beta=beta0, gamma=gamma0, eta=eta0)
