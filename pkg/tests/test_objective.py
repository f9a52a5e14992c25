import numpy as np
import pytest

from pairvc.model import Dataset, pair_list, pairwise_mahalanobis, shape_matrix
from pairvc.objective import (PairWorkspace, _col_mscale, beta_system,
                              grad_beta, grad_gamma, loss_S, loss_tau,
                              pair_distances, pair_scales, solve_eta,
                              tilde_weights)
from pairvc.scales import RhoConfig, mscale, rho_opt_sq, tau_scale
from tests.conftest import make_instance


def fd_gradient(fn, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for r in range(x.size):
        h = step * (1.0 + abs(x[r]))
        up, dn = x.copy(), x.copy()
        up[r] += h
        dn[r] -= h
        g[r] = (fn(up) - fn(dn)) / (2.0 * h)
    return g


def test_pair_distances_match_model_helper():
    ds, spec, truth = make_instance(n=10, p=4, k=3, J=2, seed=1)
    ws = PairWorkspace(ds, spec)
    M, _ = pair_distances(ws, truth.beta, truth.gamma)
    S = shape_matrix(spec, truth.gamma)
    resid = ds.y - np.einsum("npk,k->np", ds.x, truth.beta)
    assert np.allclose(M, pairwise_mahalanobis(resid, S, normalized=True),
                       rtol=1e-12)


def test_columnwise_mscale_matches_direct():
    rng = np.random.default_rng(2)
    M = rng.gamma(2.0, 1.0, size=(40, 7))
    M[:, 3] *= 1e6
    M[:25, 5] = 0.0
    s, degen = _col_mscale(M, 1.0, 0.5)
    for q in range(7):
        ref = mscale(M[:, q], 1.0, 0.5)
        assert degen[q] == ref.degenerate
        if not ref.degenerate:
            assert abs(s[q] - ref.value) < 1e-10 * ref.value
        else:
            assert s[q] == 0.0


def test_columnwise_mscale_huge_values_fallback():
    rng = np.random.default_rng(3)
    M = rng.gamma(2.0, 1.0, size=(30, 3))
    M[0, 1] = 1e80
    s, _ = _col_mscale(M, 1.0, 0.5)
    for q in range(3):
        ref = mscale(M[:, q], 1.0, 0.5).value
        assert abs(s[q] - ref) < 1e-9 * ref


def test_pair_scales_and_losses():
    ds, spec, truth = make_instance(n=15, p=4, k=3, J=2, seed=4)
    ws = PairWorkspace(ds, spec)
    rho = RhoConfig()
    s, tau, M, degen = pair_scales(ws, truth.beta, truth.gamma, rho)
    for q in range(M.shape[1]):
        assert abs(tau[q] - tau_scale(M[:, q], rho.c1, rho.c2, rho.b).value) \
            < 1e-10 * max(tau[q], 1e-30)
    assert abs(loss_tau(ws, truth.beta, truth.gamma, rho) - tau.sum()) < 1e-12
    assert abs(loss_S(ws, truth.beta, truth.gamma, rho) - s.sum()) < 1e-12


def test_zero_residual_losses_vanish():
    ds, spec, truth = make_instance(n=8, p=4, k=3, J=2, seed=5)
    exact = Dataset(y=np.einsum("npk,k->np", ds.x, truth.beta), x=ds.x)
    ws = PairWorkspace(exact, spec)
    rho = RhoConfig()
    assert loss_tau(ws, truth.beta, truth.gamma, rho) == 0.0
    assert loss_S(ws, truth.beta, truth.gamma, rho) == 0.0


def test_single_pair_reduces_to_plain_scales():
    ds, spec, truth = make_instance(n=20, p=2, k=2, J=1, seed=6)
    ws = PairWorkspace(ds, spec)
    rho = RhoConfig()
    M, _ = pair_distances(ws, truth.beta, truth.gamma)
    assert M.shape[1] == 1
    assert abs(loss_S(ws, truth.beta, truth.gamma, rho)
               - mscale(M[:, 0], rho.c1, rho.b).value) < 1e-12
    assert abs(loss_tau(ws, truth.beta, truth.gamma, rho)
               - tau_scale(M[:, 0], rho.c1, rho.c2, rho.b).value) < 1e-12


def test_tau_equals_b_times_s_when_losses_match():
    ds, spec, truth = make_instance(n=14, p=4, k=3, J=2, seed=7)
    ws = PairWorkspace(ds, spec)
    rho = RhoConfig(c1=1.0, c2=1.0, b=0.5)
    lt = loss_tau(ws, truth.beta, truth.gamma, rho)
    ls = loss_S(ws, truth.beta, truth.gamma, rho)
    assert abs(lt - rho.b * ls) < 1e-12 * max(1.0, ls)


def test_objective_equivariance_identities():
    ds, spec, truth = make_instance(n=16, p=4, k=3, J=2, seed=8)
    ws = PairWorkspace(ds, spec)
    rho = RhoConfig()
    base = loss_tau(ws, truth.beta, truth.gamma, rho)
    rng = np.random.default_rng(80)

    delta = rng.standard_normal(3)
    shifted = Dataset(y=ds.y + ds.x @ delta, x=ds.x)
    ws_shift = PairWorkspace(shifted, spec)
    val = loss_tau(ws_shift, truth.beta + delta, truth.gamma, rho)
    assert abs(val - base) < 1e-9 * base

    zeta = 3.7
    ws_scale = PairWorkspace(Dataset(y=zeta * ds.y, x=ds.x), spec)
    val = loss_tau(ws_scale, zeta * truth.beta, truth.gamma, rho)
    assert abs(val - zeta * zeta * base) < 1e-9 * zeta * zeta * base

    B = rng.standard_normal((3, 3)) + 3.0 * np.eye(3)
    ws_aff = PairWorkspace(Dataset(y=ds.y, x=ds.x @ B), spec)
    val = loss_tau(ws_aff, np.linalg.solve(B, truth.beta), truth.gamma, rho)
    assert abs(val - base) < 1e-9 * base


def test_tilde_weights_vanish_for_gross_and_degenerate():
    rho = RhoConfig()
    M = np.abs(np.random.default_rng(9).standard_normal((12, 2))) + 0.1
    M[0, 0] = 1e9
    s, degen = _col_mscale(M, rho.c1, rho.b)
    wt = tilde_weights(M, s, degen, rho, "tau")
    assert wt[0, 0] == 0.0
    assert np.all(wt[1:, 0] != 0.0)
    degen2 = degen.copy()
    degen2[1] = True
    wt2 = tilde_weights(M, s, degen2, rho, "tau")
    assert np.all(wt2[:, 1] == 0.0)


@pytest.mark.parametrize("objective", ["tau", "s"])
def test_gradients_match_finite_differences(objective):
    rho = RhoConfig()
    lf = loss_tau if objective == "tau" else loss_S
    for seed in range(6):
        ds, spec, truth = make_instance(n=30, p=4, k=3, J=2, seed=100 + seed)
        ws = PairWorkspace(ds, spec)
        gb = grad_beta(ws, truth.beta, truth.gamma, rho, objective)
        gg = grad_gamma(ws, truth.beta, truth.gamma, rho, objective)

        fb = fd_gradient(lambda b: lf(ws, b, truth.gamma, rho), truth.beta)
        fg = fd_gradient(lambda g: lf(ws, truth.beta, g, rho), truth.gamma)
        assert np.linalg.norm(gb - fb) < 1e-5 * (1.0 + np.linalg.norm(fb))
        assert np.linalg.norm(gg - fg) < 1e-5 * (1.0 + np.linalg.norm(fg))


def test_gradient_shift_invariance():
    ds, spec, truth = make_instance(n=18, p=4, k=3, J=2, seed=12)
    rho = RhoConfig()
    delta = np.random.default_rng(13).standard_normal(3)
    ws = PairWorkspace(ds, spec)
    ws2 = PairWorkspace(Dataset(y=ds.y + ds.x @ delta, x=ds.x), spec)
    g1 = grad_beta(ws, truth.beta, truth.gamma, rho)
    g2 = grad_beta(ws2, truth.beta + delta, truth.gamma, rho)
    assert np.allclose(g1, g2, rtol=1e-9, atol=1e-12)


def test_beta_system_reduces_to_stacked_least_squares():
    # Equal magnitude residuals under the identity shape give every
    # observation the same distance, so the weights are one constant and
    # the update must coincide with plain stacked least squares.
    from pairvc.model import ModelSpec
    rng = np.random.default_rng(14)
    n, p, k = 25, 4, 3
    x = rng.standard_normal((n, p, k))
    beta = rng.standard_normal(k)
    signs = rng.choice([-1.0, 1.0], size=(n, p))
    y = x @ beta + 1.7 * signs
    ds = Dataset(y=y, x=x)
    spec = ModelSpec(p=p, k=k, structures=(np.zeros((p, p)),))
    ws = PairWorkspace(ds, spec)
    A, rhs = beta_system(ws, beta, np.zeros(1), RhoConfig(), "tau")
    bhat = np.linalg.solve(A, rhs)
    ref, *_ = np.linalg.lstsq(x.reshape(-1, k), y.reshape(-1), rcond=None)
    assert np.allclose(bhat, ref, rtol=1e-8)


def test_solve_eta_closed_form_and_homogeneity():
    rng = np.random.default_rng(15)
    n, p, k = 12, 4, 2
    x = rng.standard_normal((n, p, k))
    beta = rng.standard_normal(k)
    spec_struct = (np.zeros((p, p)),)
    from pairvc.model import ModelSpec
    spec = ModelSpec(p=p, k=k, structures=spec_struct)
    v = 1.3
    y = x @ beta + np.sqrt(v)
    ds = Dataset(y=y, x=x)
    ws = PairWorkspace(ds, spec)
    rho = RhoConfig()
    # Identity shape: every pair distance is 2 v, so the pooled scale
    # inverts on the linear piece at 3.25.
    r = solve_eta(ws, beta, np.zeros(1), rho)
    assert abs(r.value - 2.0 * v / 3.25) < 1e-10

    zeta = 2.5
    ws2 = PairWorkspace(Dataset(y=zeta * y, x=x), spec)
    r2 = solve_eta(ws2, zeta * beta, np.zeros(1), rho)
    assert abs(r2.value - zeta * zeta * r.value) < 1e-9 * r2.value

    exact = Dataset(y=x @ beta, x=x)
    r3 = solve_eta(PairWorkspace(exact, spec), beta, np.zeros(1), rho)
    assert r3.degenerate and r3.value == 0.0
