import numpy as np
import pytest

from pairvc.initial import (gamma_from_scatter, initial_estimates,
                            pairwise_scatter, project_feasible)
from pairvc.scales import RhoConfig
from pairvc.model import ModelSpec, assemble_sigma, feasible
from pairvc.simulate import SimScenario, gen_clean
from tests.conftest import make_instance, random_structures


def test_gamma_from_scatter_exact_recovery():
    rng = np.random.default_rng(0)
    spec = ModelSpec(p=5, k=2, structures=random_structures(5, 3, rng))
    gamma = np.array([0.8, 0.25, 1.4])
    eta = 2.3
    S = assemble_sigma(spec, eta, gamma)
    g, e = gamma_from_scatter(spec, S)
    assert np.allclose(g, gamma, atol=1e-8)
    assert abs(e - eta) < 1e-8


def test_project_feasible_is_identity_inside():
    rng = np.random.default_rng(1)
    spec = ModelSpec(p=4, k=2, structures=random_structures(4, 2, rng))
    gamma = np.array([0.2, 0.4])
    assert np.array_equal(project_feasible(spec, gamma), gamma)


def test_project_feasible_pulls_inside():
    w = np.ones(3)
    spec = ModelSpec(p=3, k=1, structures=(np.outer(w, w),))
    bad = np.array([-0.5])
    g = project_feasible(spec, bad)
    assert feasible(spec, g)
    # Projection walks toward zero, which is always feasible.
    assert -1.0 / 3.0 < g[0] <= 0.0


def test_pairwise_scatter_on_gaussian_sample():
    rng = np.random.default_rng(2)
    C = np.array([[2.0, 0.8], [0.8, 1.5]])
    L = np.linalg.cholesky(C)
    R = rng.standard_normal((4000, 2)) @ L.T
    S = pairwise_scatter(R)
    assert np.allclose(S, S.T, atol=1e-12)
    assert np.allclose(S, C, atol=0.2)


def test_initial_estimates_close_on_clean_design():
    scn = SimScenario(n=200, seed=77)
    ds = gen_clean(scn, np.random.default_rng(77))
    spec = scn.model_spec()
    p0 = initial_estimates(ds, spec, RhoConfig(), seed=0)
    assert np.linalg.norm(p0.beta - np.asarray(scn.beta)) < 0.2
    assert feasible(spec, p0.gamma)
    assert np.all(np.isfinite(p0.gamma))
    assert p0.eta > 0


def test_initial_estimates_deterministic():
    ds, spec, _ = make_instance(n=40, p=4, k=3, J=2, seed=3)
    a = initial_estimates(ds, spec, RhoConfig(), seed=5)
    b = initial_estimates(ds, spec, RhoConfig(), seed=5)
    assert np.array_equal(a.beta, b.beta)
    assert np.array_equal(a.gamma, b.gamma)
    c = initial_estimates(ds, spec, RhoConfig(), seed=6)
    assert not np.array_equal(a.beta, c.beta)


def test_initial_estimates_survive_gross_rows():
    ds, spec, truth = make_instance(n=60, p=4, k=3, J=2, seed=4)
    y = ds.y.copy()
    y[:12] += 1e4
    from pairvc.model import Dataset
    bad = Dataset(y=y, x=ds.x)
    p0 = initial_estimates(bad, spec, RhoConfig(), seed=0)
    assert np.linalg.norm(p0.beta - truth.beta) < 2.0
