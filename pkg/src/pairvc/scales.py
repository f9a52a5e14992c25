"""Bounded loss family and robust scale estimators.

The loss here is the smooth redescending rho from the optimal family,
parametrized by a cutoff c. It is quadratic near zero, polynomial in a
transition band, and constant equal to 1 past the rejection point. Both
the plain version (argument on the root scale) and the squared-argument
version used on Mahalanobis-type distances are provided, together with
M-scales, tau-scales, and the Gaussian consistency integrals.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize, stats

# Polynomial coefficients of the transition band, constant term first,
# and the normalizing constant that makes the function reach 1.
_A0 = 1.792
_A1 = -1.944
_A2 = 1.728
_A3 = -0.312
_A4 = 0.016
_NORM = 3.250

# On the squared scale the pieces join at 4c^2 and 9c^2.
_LO = 4.0
_HI = 9.0


def rho_opt(v, c=1.0):
    """Bounded loss on the root scale, rho_opt(v) in [0, 1] for v >= 0."""
    v = np.asarray(v, dtype=float)
    return rho_opt_sq(v * v, c)


def rho_opt_sq(u, c=1.0):
    """Bounded loss on the squared scale, rho_opt_sq(u) = rho_opt(sqrt(u)).

    Piecewise in w = u / c^2: linear for w <= 4, quartic polynomial in w
    for 4 < w <= 9, constant 1 beyond. Continuous with continuous first
    derivative at both joins.
    """
    u = np.asarray(u, dtype=float)
    w = u / (c * c)
    out = np.where(w <= _LO, w / (2.0 * _NORM), 1.0)
    mid = (w > _LO) & (w <= _HI)
    if np.any(mid):
        wm = w[mid]
        poly = (_A4 / 8.0) * wm**4 + (_A3 / 6.0) * wm**3 \
            + (_A2 / 4.0) * wm**2 + (_A1 / 2.0) * wm + _A0
        out = np.array(out, copy=True)
        out[mid] = poly / _NORM
    if out.ndim == 0:
        return float(out)
    return out


def weight(u, c=1.0):
    """Derivative of rho_opt_sq in its first argument.

    Nonnegative, continuous, 1/(2 a c^2) on the linear piece and zero at
    and past the rejection point 9c^2.
    """
    u = np.asarray(u, dtype=float)
    c2 = c * c
    w = u / c2
    out = np.where(w <= _LO, 1.0 / (2.0 * _NORM * c2), 0.0)
    mid = (w > _LO) & (w < _HI)
    if np.any(mid):
        wm = w[mid]
        d = _A4 * wm**3 + _A3 * wm**2 + _A2 * wm + _A1
        out = np.array(out, copy=True)
        out[mid] = d / (2.0 * _NORM * c2)
    if out.ndim == 0:
        return float(out)
    return out


@lru_cache(maxsize=256)
def consistency_b(c: float, q: int) -> float:
    """Expectation of rho_opt_sq(U, c) for U chi-squared with q degrees.

    Integrates the smooth part over [0, 9c^2] with the join at 4c^2 as
    an interior breakpoint and adds the exact tail mass where the loss
    is identically 1.
    """
    c2 = c * c
    hi = _HI * c2

    def f(u):
        return rho_opt_sq(u, c) * stats.chi2.pdf(u, q)

    val, _ = integrate.quad(f, 0.0, hi, points=[_LO * c2], limit=200,
                            epsabs=1e-12, epsrel=1e-10)
    return float(val + stats.chi2.sf(hi, q))


def calibrate_cutoff(b: float, q: int = 2) -> float:
    """Cutoff c with consistency_b(c, q) == b, found by root bracketing."""
    return float(optimize.brentq(
        lambda c: consistency_b(c, q) - b, 0.05, 50.0, xtol=1e-12))


def cutoff_for_rejection(q: int, alpha: float = 0.01) -> float:
    """Cutoff placing the rejection point at the chi-squared 1-alpha quantile."""
    return float(np.sqrt(stats.chi2.ppf(1.0 - alpha, q) / _HI))


def reference_pair_scale(c: float, b: float) -> float:
    """Population M-scale of squared bivariate Gaussian distances at (c, b).

    Since rho_opt_sq(u / s, c) = rho_opt_sq(u, c sqrt(s)), the scale s
    with E rho_opt_sq(U / s, c) = b for U chi-squared(2) is
    (calibrate_cutoff(b, 2) / c)^2. Equals 1 exactly when (c, b) is a
    consistency pair; dividing a pooled pair scale by it recovers the
    error variance under any tuning.
    """
    return (calibrate_cutoff(b, q=2) / c) ** 2


@dataclass(frozen=True)
class RhoConfig:
    """Tuning of the two losses and the scale level.

    c1 drives the M-scale (robustness), c2 the tau refinement
    (efficiency), and b is the right hand side of the M-scale equation.
    """

    c1: float = 1.0
    c2: float = 1.64
    b: float = 0.5

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("cutoffs must be positive")
        if self.c2 < self.c1:
            raise ValueError("c2 must be at least c1 so the second loss "
                             "sits below the first")
        if not 0.0 < self.b < 1.0:
            raise ValueError("b must lie strictly between 0 and 1")

    def calibrated(self) -> "RhoConfig":
        """Retune c1 so the pair scale is Fisher consistent at the Gaussian.

        Solves consistency_b(c1, 2) == b. Leaves c2 and b alone.
        """
        return replace(self, c1=calibrate_cutoff(self.b, q=2))

    def b_fullvec(self, q: int) -> float:
        """Consistency level E rho_opt_sq for dimension q, cached."""
        return consistency_b(self.c1, q)


@dataclass(frozen=True)
class ScaleResult:
    value: float
    degenerate: bool = False


def _bisect_scale(m: np.ndarray, c: float, b: float) -> float:
    # Bracket then bisect mean rho_opt_sq(m / s) = b. The left side is
    # continuous and nonincreasing in s, so the bracket is preserved.
    n = m.size
    c2 = c * c
    pos = m[m > 0]
    lo = pos.min() / (_HI * c2)
    # rho_opt_sq(u) <= u / (2 a c^2), so this hi gives mean <= b.
    hi = max(float(m.mean()) / (2.0 * _NORM * c2 * b), lo * 2.0)
    for _ in range(200):
        if rho_opt_sq(m / lo, c).mean() > b:
            break
        lo *= 0.5
    for _ in range(200):
        if rho_opt_sq(m / hi, c).mean() <= b:
            break
        hi *= 2.0
    while (hi - lo) > 1e-14 * hi:
        mid = 0.5 * (lo + hi)
        if rho_opt_sq(m / mid, c).mean() > b:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def mscale(m, c: float = 1.0, b: float = 0.5) -> ScaleResult:
    """M-scale of nonnegative values m, mean rho_opt_sq(m / s) = b.

    Returns a degenerate zero scale when the fraction of exact zeros
    reaches 1 - b, in which case no positive solution exists.
    """
    m = np.asarray(m, dtype=float).ravel()
    if m.size == 0:
        raise ValueError("mscale of empty input")
    if np.any(m < 0) or not np.all(np.isfinite(m)):
        raise ValueError("mscale expects finite nonnegative input")
    nzero = int(np.count_nonzero(m == 0.0))
    if nzero / m.size >= 1.0 - b:
        return ScaleResult(0.0, degenerate=True)
    return ScaleResult(_bisect_scale(m, c, b), degenerate=False)


def tau_scale(m, c1: float = 1.0, c2: float = 1.64, b: float = 0.5) -> ScaleResult:
    """Tau-scale: s times the mean of the second loss at m / s.

    Inherits degeneracy from the underlying M-scale, where the value is 0.
    """
    m = np.asarray(m, dtype=float).ravel()
    s = mscale(m, c1, b)
    if s.degenerate:
        return ScaleResult(0.0, degenerate=True)
    val = s.value * float(rho_opt_sq(m / s.value, c2).mean())
    return ScaleResult(val, degenerate=False)
