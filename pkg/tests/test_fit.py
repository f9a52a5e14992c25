import numpy as np
import pytest

from pairvc.fit import (FitConfig, beta_step, fit, fit_classical_S,
                        fit_composite_S, fit_composite_tau, gamma_step)
from pairvc.model import Dataset, ModelSpec, Parameters, assemble_sigma
from pairvc.objective import PairWorkspace, grad_gamma, loss_S, loss_tau
from pairvc.scales import RhoConfig
from pairvc.simplex import SimplexOptions
from pairvc.simulate import SimScenario, gen_clean
from tests.conftest import make_instance

FAST = FitConfig(simplex=SimplexOptions(step=0.2, max_evals=120,
                                        xtol=1e-8, ftol=1e-11))


@pytest.fixture(scope="module")
def tau_fit():
    ds, spec, truth = make_instance(n=60, p=4, k=3, J=2, seed=21)
    return ds, spec, truth, fit_composite_tau(ds, spec, FAST)


def test_converges_on_clean_data(tau_fit):
    _, _, _, res = tau_fit
    assert res.converged
    assert res.iterations < FAST.max_iter
    assert np.all(np.isfinite(res.beta))
    assert res.eta > 0 and not res.eta_degenerate


def test_trace_loss_nonincreasing(tau_fit):
    _, _, _, res = tau_fit
    losses = [t[1] for t in res.trace]
    diffs = np.diff(losses)
    assert np.all(diffs <= 1e-10 * (1.0 + np.abs(losses[:-1])))


def test_loss_recompute_invariant(tau_fit):
    ds, spec, _, res = tau_fit
    ws = PairWorkspace(ds, spec)
    again = loss_tau(ws, res.beta, res.gamma, FAST.rho)
    assert abs(again - res.loss) <= 1e-8 * (1.0 + abs(res.loss))


def test_beta_step_fixed_point(tau_fit):
    ds, spec, _, res = tau_fit
    ws = PairWorkspace(ds, spec)
    nxt = beta_step(ws, res.beta, res.gamma, FAST.rho, "tau")
    assert np.linalg.norm(nxt - res.beta) < 1e-3 * (1 + np.linalg.norm(res.beta))


def test_gamma_gradient_small_after_fit(tau_fit):
    ds, spec, _, res = tau_fit
    ws = PairWorkspace(ds, spec)
    g = grad_gamma(ws, res.beta, res.gamma, FAST.rho, "tau")
    assert np.linalg.norm(g) < 1e-2 * (1.0 + np.linalg.norm(res.gamma))


def test_estimates_near_truth(tau_fit):
    _, _, truth, res = tau_fit
    assert np.linalg.norm(res.beta - truth.beta) < 0.6
    assert np.linalg.norm(res.gamma - truth.gamma) < 1.2


def test_scale_equivariance_end_to_end():
    ds, spec, _ = make_instance(n=40, p=4, k=3, J=2, seed=5)
    zeta = 3.0
    scaled = Dataset(y=zeta * ds.y, x=ds.x.copy())
    a = fit_composite_tau(ds, spec, FAST)
    b = fit_composite_tau(scaled, spec, FAST)
    assert np.allclose(b.beta, zeta * a.beta, rtol=1e-6, atol=1e-6)
    assert np.allclose(b.gamma, a.gamma, rtol=1e-6, atol=1e-6)
    assert np.isclose(b.eta, zeta**2 * a.eta, rtol=1e-5)


def test_regression_equivariance_end_to_end():
    ds, spec, _ = make_instance(n=40, p=4, k=3, J=2, seed=6)
    rng = np.random.default_rng(60)
    delta = rng.standard_normal(ds.k)
    shifted = Dataset(y=ds.y + np.einsum("npk,k->np", ds.x, delta), x=ds.x)
    a = fit_composite_tau(ds, spec, FAST)
    b = fit_composite_tau(shifted, spec, FAST)
    assert np.allclose(b.beta, a.beta + delta, rtol=1e-6, atol=1e-6)
    assert np.allclose(b.gamma, a.gamma, rtol=1e-6, atol=1e-6)


def test_toy_final_loss_beats_truth():
    # p=2, k=1, J=1, 20 units: the fitted objective value is no worse
    # than the objective at the generating parameters.
    rng = np.random.default_rng(7)
    V = np.array([[0.0, 1.0], [1.0, 0.0]])
    spec = ModelSpec(p=2, k=1, structures=(V,))
    truth = Parameters(beta=np.array([1.5]), gamma=np.array([0.6]), eta=1.0)
    S = assemble_sigma(spec, truth.eta, truth.gamma)
    L = np.linalg.cholesky(S)
    x = rng.standard_normal((20, 2, 1))
    y = x[:, :, 0] * truth.beta[0] + rng.standard_normal((20, 2)) @ L.T
    ds = Dataset(y=y, x=x)
    res = fit_composite_tau(ds, spec, FAST)
    ws = PairWorkspace(ds, spec)
    assert res.loss <= loss_tau(ws, truth.beta, truth.gamma, FAST.rho) + 1e-12


def test_tau_equals_S_when_losses_coincide():
    ds, spec, _ = make_instance(n=40, p=4, k=3, J=2, seed=8)
    rho = RhoConfig(c2=RhoConfig().c1)
    cfg = FitConfig(rho=rho, simplex=FAST.simplex)
    a = fit_composite_tau(ds, spec, cfg)
    b = fit_composite_S(ds, spec, cfg)
    assert np.allclose(a.beta, b.beta, atol=1e-6)
    assert np.allclose(a.gamma, b.gamma, atol=1e-6)
    assert np.isclose(a.loss, rho.b * b.loss, rtol=1e-8)


def test_composite_S_runs(tau_fit):
    ds, spec, truth, _ = tau_fit
    res = fit_composite_S(ds, spec, FAST)
    assert res.converged
    assert res.estimator == "composite_s"
    assert np.linalg.norm(res.beta - truth.beta) < 1.0


def test_classical_S_runs_and_is_local_min(tau_fit):
    ds, spec, truth, _ = tau_fit
    res = fit_classical_S(ds, spec, FAST)
    assert res.converged
    assert res.scale is not None and res.scale > 0
    assert np.linalg.norm(res.beta - truth.beta) < 1.0
    # Nearby parameter points do not beat the returned scale.
    from pairvc.fit import _full_distances
    from pairvc.scales import consistency_b, cutoff_for_rejection, mscale
    c_full = cutoff_for_rejection(ds.p, FAST.classical_rejection)
    b_full = consistency_b(c_full, ds.p)
    rng = np.random.default_rng(9)
    for _ in range(6):
        db = 1e-3 * rng.standard_normal(ds.k)
        m, _ = _full_distances(ds, spec, res.beta + db, res.gamma)
        assert mscale(m, c_full, b_full).value >= res.scale - 1e-7


def test_classical_S_no_structures_is_robust_regression():
    # With no structures the classical fit degrades to an S-regression
    # on 2-vectors; a planted gross minority must not move it far.
    rng = np.random.default_rng(10)
    n, k = 80, 2
    x = np.empty((n, 2, k))
    x[:, :, 0] = 1.0
    x[:, :, 1] = rng.standard_normal((n, 2))
    beta = np.array([1.0, 2.0])
    y = np.einsum("npk,k->np", x, beta) + 0.5 * rng.standard_normal((n, 2))
    y[:16] += 50.0
    ds = Dataset(y=y, x=x)
    spec = ModelSpec(p=2, k=k, structures=())
    res = fit_classical_S(ds, spec, FAST)
    assert res.gamma.size == 0
    assert np.linalg.norm(res.beta - beta) < 0.5


def test_gamma_step_empty_gamma():
    rng = np.random.default_rng(11)
    spec = ModelSpec(p=2, k=1, structures=())
    x = rng.standard_normal((25, 2, 1))
    y = x[:, :, 0] * 2.0 + rng.standard_normal((25, 2))
    ds = Dataset(y=y, x=x)
    ws = PairWorkspace(ds, spec)
    res = gamma_step(ws, np.array([2.0]), np.zeros(0), RhoConfig())
    assert res.converged and res.x.size == 0
    assert np.isfinite(res.fval)


def test_dispatch_names(tau_fit):
    ds, spec, _, res_tau = tau_fit
    r = fit(ds, spec, "composite-tau", FAST)
    assert r.estimator == "composite_tau"
    assert np.array_equal(r.beta, res_tau.beta)
    assert fit(ds, spec, "classical-s", FAST).estimator == "classical_s"
    assert fit(ds, spec, "gaussian-ml", FAST).estimator == "gaussian_ml"
    with pytest.raises(ValueError, match="unknown estimator"):
        fit(ds, spec, "nope", FAST)


def test_single_coordinate_data_rejected():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((10, 1, 1))
    with pytest.raises(ValueError, match="two coordinates"):
        Dataset(y=x[:, :, 0].copy(), x=x)


def test_start_override_used():
    ds, spec, truth = make_instance(n=40, p=4, k=3, J=2, seed=13)
    res = fit_composite_tau(ds, spec, FAST, start=truth)
    assert res.converged
    assert np.linalg.norm(res.beta - truth.beta) < 0.6
