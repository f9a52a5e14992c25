"""Data layout and covariance structure for grouped multivariate responses.

A dataset holds n independent units, each with a p-vector response and a
p x k covariate matrix. The within-unit covariance is eta times the sum
of the identity and nonnegative combinations gamma_j of fixed symmetric
structure matrices. Estimation works on coordinate pairs, so most
helpers here produce the pair bookkeeping and the normalized 2 x 2
blocks the pairwise distances are built from.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class PairIndex(NamedTuple):
    """Zero based coordinate pair (j, l) with j < l."""

    j: int
    l: int


def pair_list(p: int) -> list[PairIndex]:
    return [PairIndex(j, l) for j in range(p) for l in range(j + 1, p)]


def pair_arrays(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (J, L) over all p(p-1)/2 pairs, lexicographic order."""
    jj, ll = np.triu_indices(p, 1)
    return jj, ll


@dataclass(frozen=True)
class ModelSpec:
    """Covariance structure: identity plus J symmetric structure matrices."""

    p: int
    k: int
    structures: tuple[np.ndarray, ...]

    def __post_init__(self):
        if self.p < 2:
            raise ValueError("need at least two coordinates")
        if self.k < 1:
            raise ValueError("need at least one covariate column")
        mats = []
        for V in self.structures:
            V = np.asarray(V, dtype=float)
            if V.shape != (self.p, self.p):
                raise ValueError("structure matrix has wrong shape")
            if not np.allclose(V, V.T, atol=1e-10):
                raise ValueError("structure matrices must be symmetric")
            mats.append(0.5 * (V + V.T))
        object.__setattr__(self, "structures", tuple(mats))

    @property
    def n_structures(self) -> int:
        return len(self.structures)


@dataclass(frozen=True)
class Dataset:
    """n units with p-vector responses y and p x k covariates x."""

    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if y.ndim != 2:
            raise ValueError("y must be n x p")
        if y.shape[1] < 2:
            raise ValueError("need at least two coordinates")
        if x.ndim != 3 or x.shape[:2] != y.shape:
            raise ValueError("x must be n x p x k matching y")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("data must be finite")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    @property
    def k(self) -> int:
        return self.x.shape[2]


@dataclass(frozen=True)
class Parameters:
    """Regression coefficients, structure weights, and the error variance."""

    beta: np.ndarray
    gamma: np.ndarray
    eta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float).ravel())


def assemble_sigma(spec: ModelSpec, eta: float, gamma: np.ndarray) -> np.ndarray:
    """Covariance eta * (I + sum_j gamma_j V_j). Raises if not positive definite."""
    S = shape_matrix(spec, gamma)
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ValueError("gamma outside the feasible region, shape not PD")
    if eta <= 0:
        raise ValueError("eta must be positive")
    return eta * S


def shape_matrix(spec: ModelSpec, gamma: np.ndarray) -> np.ndarray:
    """I + sum_j gamma_j V_j without the eta factor or the PD check."""
    gamma = np.asarray(gamma, dtype=float).ravel()
    if gamma.size != spec.n_structures:
        raise ValueError("gamma length does not match the structure count")
    S = np.eye(spec.p)
    for g, V in zip(gamma, spec.structures):
        S = S + g * V
    return S


def feasible(spec: ModelSpec, gamma: np.ndarray) -> bool:
    """True when I + sum_j gamma_j V_j is positive definite."""
    try:
        np.linalg.cholesky(shape_matrix(spec, gamma))
        return True
    except np.linalg.LinAlgError:
        return False


def pair_submatrix(S: np.ndarray, pair: PairIndex, normalized: bool = True) -> np.ndarray:
    """2 x 2 block of S at the pair, scaled to unit determinant if asked."""
    j, l = pair
    B = np.array([[S[j, j], S[j, l]], [S[j, l], S[l, l]]])
    if not normalized:
        return B
    d = B[0, 0] * B[1, 1] - B[0, 1] * B[0, 1]
    if d <= 0:
        raise ValueError("pair block is not positive definite")
    return B / np.sqrt(d)


def sym_inv_sqrt_2x2(B: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root of a 2 x 2 SPD matrix, for whitening."""
    vals, vecs = np.linalg.eigh(B)
    if vals[0] <= 0:
        raise ValueError("matrix is not positive definite")
    return (vecs * (1.0 / np.sqrt(vals))) @ vecs.T


def _pair_blocks(S: np.ndarray, jj: np.ndarray, ll: np.ndarray):
    # Entries of each 2 x 2 block and its determinant, vectorized over pairs.
    sjj = S[jj, jj]
    sll = S[ll, ll]
    sjl = S[jj, ll]
    det = sjj * sll - sjl * sjl
    return sjj, sll, sjl, det


def pairwise_mahalanobis(resid: np.ndarray, S: np.ndarray,
                         normalized: bool = True) -> np.ndarray:
    """Squared pair distances of residual rows under the pair blocks of S.

    resid is n x p. Returns an n x p(p-1)/2 matrix in lexicographic pair
    order. With normalized=True each block is scaled to unit determinant
    before inversion; this is the distance the pair scales are built on.
    """
    n, p = resid.shape
    jj, ll = pair_arrays(p)
    sjj, sll, sjl, det = _pair_blocks(S, jj, ll)
    if np.any(det <= 0):
        raise ValueError("a pair block of S is not positive definite")
    rj = resid[:, jj]
    rl = resid[:, ll]
    quad = sll * rj * rj - 2.0 * sjl * rj * rl + sjj * rl * rl
    scale = np.sqrt(det) if normalized else det
    return quad / scale


def build_crossed_design(F: int, G: int, H: int) -> list[np.ndarray]:
    """Structure matrices of a two factor crossed design with replicates.

    Coordinates are ordered with the first factor slowest and the
    replicate index fastest. Returns the three sharing indicators: same
    first factor level, same second factor level, same replicate index.
    """
    if min(F, G, H) < 1:
        raise ValueError("factor levels must be positive")
    jF, jG, jH = np.ones((F, F)), np.ones((G, G)), np.ones((H, H))
    iF, iG, iH = np.eye(F), np.eye(G), np.eye(H)
    V1 = np.kron(iF, np.kron(jG, jH))
    V2 = np.kron(jF, np.kron(iG, jH))
    V3 = np.kron(jF, np.kron(jG, iH))
    return [V1, V2, V3]


def build_random_coeff_design(times: Sequence[float]) -> list[np.ndarray]:
    """Structure matrices of a quadratic random coefficient growth model.

    times holds the p measurement occasions. Returns six structures:
    the variances of intercept, slope, and curvature, then the three
    symmetrized cross products.
    """
    a = np.asarray(times, dtype=float).ravel()
    if a.size < 2:
        raise ValueError("need at least two occasions")
    j = np.ones_like(a)
    b = a * a
    return [
        np.outer(j, j),
        np.outer(a, a),
        np.outer(b, b),
        np.outer(j, a) + np.outer(a, j),
        np.outer(j, b) + np.outer(b, j),
        np.outer(a, b) + np.outer(b, a),
    ]
