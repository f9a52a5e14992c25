import numpy as np
import pytest

from pairvc.model import Dataset, ModelSpec, Parameters, assemble_sigma
from pairvc.simulate import SimScenario, gen_clean


def random_structures(p, J, rng):
    """Symmetric PSD structures from random rank-one factors, so any
    nonnegative gamma stays feasible."""
    out = []
    for _ in range(J):
        w = rng.standard_normal(p)
        out.append(np.outer(w, w))
    return tuple(out)


def make_instance(n=30, p=4, k=3, J=2, seed=0, gamma_scale=0.5):
    """Small nondegenerate dataset with known truth, for gradient and
    equivariance checks."""
    rng = np.random.default_rng(seed)
    structures = random_structures(p, J, rng)
    spec = ModelSpec(p=p, k=k, structures=structures)
    beta = rng.standard_normal(k)
    gamma = gamma_scale * rng.random(J) + 0.1
    x = rng.standard_normal((n, p, k))
    S = assemble_sigma(spec, 1.0, gamma)
    L = np.linalg.cholesky(S)
    y = x @ beta + rng.standard_normal((n, p)) @ L.T
    return Dataset(y=y, x=x), spec, Parameters(beta, gamma, 1.0)


@pytest.fixture
def small_crossed():
    scn = SimScenario(n=30, seed=11)
    ds = gen_clean(scn, np.random.default_rng(11))
    return ds, scn.model_spec(), scn.truth(), scn
