"""Small Nelder-Mead simplex minimizer.

Used for the low dimensional structure weight searches. Infeasible
points may return +inf; the simplex then contracts back into the
feasible region. Deterministic for a given start.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SimplexOptions:
    step: float = 0.1
    reflect: float = 1.0
    expand: float = 2.0
    contract: float = 0.5
    shrink: float = 0.5
    max_evals: int = 400
    xtol: float = 1e-8
    ftol: float = 1e-10


@dataclass
class SimplexResult:
    x: np.ndarray
    fval: float
    n_evals: int
    converged: bool


def minimize_simplex(fn, x0, options: SimplexOptions | None = None) -> SimplexResult:
    """Minimize fn from x0. Never returns a point worse than the start."""
    opt = options or SimplexOptions()
    x0 = np.asarray(x0, dtype=float).ravel()
    d = x0.size
    evals = 0

    def call(x):
        nonlocal evals
        evals += 1
        v = fn(x)
        return float(v) if np.isfinite(v) else np.inf

    # Initial simplex: the start plus a step along each coordinate,
    # scaled by the magnitude of that coordinate when it is nonzero.
    pts = [x0.copy()]
    for i in range(d):
        q = x0.copy()
        h = opt.step * (abs(q[i]) if q[i] != 0 else 1.0)
        q[i] += h
        pts.append(q)
    X = np.array(pts)
    F = np.array([call(x) for x in X])

    while evals < opt.max_evals:
        order = np.argsort(F, kind="stable")
        X, F = X[order], F[order]
        fbest, fworst = F[0], F[-1]
        spread = np.max(np.abs(X[1:] - X[0]))
        fspread = fworst - fbest if np.isfinite(fworst) else np.inf
        if spread <= opt.xtol * (1.0 + np.max(np.abs(X[0]))) and \
                fspread <= opt.ftol * (1.0 + abs(fbest)):
            return SimplexResult(X[0], F[0], evals, True)

        centroid = X[:-1].mean(axis=0)
        xr = centroid + opt.reflect * (centroid - X[-1])
        fr = call(xr)
        if fr < F[0]:
            xe = centroid + opt.expand * (xr - centroid)
            fe = call(xe)
            if fe < fr:
                X[-1], F[-1] = xe, fe
            else:
                X[-1], F[-1] = xr, fr
        elif fr < F[-2]:
            X[-1], F[-1] = xr, fr
        else:
            inside = F[-1] <= fr
            base = X[-1] if inside else xr
            xc = centroid + opt.contract * (base - centroid)
            fc = call(xc)
            if fc < min(F[-1], fr):
                X[-1], F[-1] = xc, fc
            else:
                # Shrink toward the best vertex.
                for i in range(1, d + 1):
                    X[i] = X[0] + opt.shrink * (X[i] - X[0])
                    F[i] = call(X[i])

    order = np.argsort(F, kind="stable")
    return SimplexResult(X[order[0]], F[order[0]], evals, False)
