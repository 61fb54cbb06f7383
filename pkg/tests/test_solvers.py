import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import dense_phi, random_masks, tikhonov_solution
from scideq.errors import Diverged, NotDifferentiable
from scideq.regularizers import Regularizer, gaussian_denoiser, identity_denoiser, tikhonov_denoiser
from scideq.diagnostics import psnr
from scideq.sensing import MaskSet, generate_instance, phi_adjoint, phi_apply, project_onto_manifold
from scideq.solvers import (
    SCALED,
    UNSCALED,
    AdmmState,
    SolverConfig,
    admm_step,
    admm_u_update,
    admm_v_update,
    admm_w_update,
    admm_x_update,
    gap_step,
    gd_step,
    objective,
    run_admm,
    run_gap,
    run_gd,
    safe_step,
)


def small_instance(seed, n=4, B=2):
    rng = np.random.default_rng(seed)
    m = MaskSet(random_masks(rng, n, B))
    y = rng.standard_normal(n)
    return m, y, rng


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(step_alpha=0)
    with pytest.raises(ValueError):
        SolverConfig(rho=-1)
    with pytest.raises(ValueError):
        SolverConfig(max_iters=0)


def test_gd_step_examples():
    m = MaskSet([[1.0]])
    np.testing.assert_array_equal(gd_step(m, [3.0], [[0.0]], Regularizer("zero"), 1.0), [[3.0]])
    x = np.array([[0.7]])
    np.testing.assert_array_equal(gd_step(m, [3.0], x, Regularizer("zero"), 0.0), x)
    with pytest.raises(NotDifferentiable):
        gd_step(m, [3.0], x, Regularizer("l1", 1.0), 0.1)


def test_gd_step_descends():
    m, y, rng = small_instance(0)
    r = Regularizer("tikhonov", 0.5)
    x = rng.standard_normal((2, 4))
    assert objective(m, y, gd_step(m, y, x, r, 1e-3), r) < objective(m, y, x, r)


def test_run_gd_zero_measurement():
    m, _, _ = small_instance(1)
    x, trace = run_gd(m, np.zeros(4), Regularizer("tikhonov", 1.0), SolverConfig(0.3, max_iters=50))
    np.testing.assert_array_equal(x, 0)
    assert trace.converged


def test_run_gd_matches_oracle():
    m, y, _ = small_instance(2)
    r = Regularizer("tikhonov", 0.5)
    x, trace = run_gd(m, y, r, SolverConfig(safe_step(m, r), max_iters=20000, tol=1e-13))
    assert np.max(np.abs(x - tikhonov_solution(m.masks, y, 0.5))) <= 1e-6
    assert trace.converged


def test_run_gd_single_iteration():
    m, y, _ = small_instance(3)
    r = Regularizer("tikhonov", 0.5)
    x, trace = run_gd(m, y, r, SolverConfig(0.1, max_iters=1))
    assert trace.iterations == 1
    np.testing.assert_array_equal(x, gd_step(m, y, phi_adjoint(m, y), r, 0.1))


def test_run_gd_diverges_with_large_step():
    m, y, _ = small_instance(4)
    with pytest.raises(Diverged) as info:
        run_gd(m, y, Regularizer("zero"), SolverConfig(step_alpha=10.0, max_iters=1000))
    assert info.value.trace.iterations > 0


def test_admm_x_update_scalar():
    m = MaskSet([[1.0]])
    np.testing.assert_allclose(admm_x_update(m, [4.0], [[0.0]], [[0.0]], 1.0), [[2.0]])


@given(st.integers(0, 2**31), st.floats(0.1, 10), st.sampled_from([UNSCALED, SCALED]))
def test_admm_x_update_oracle_and_stationarity(seed, rho, form):
    n, B = 4, 2
    m, y, rng = small_instance(seed, n, B)
    v, dual = rng.standard_normal((2, B, n))
    x = admm_x_update(m, y, v, dual, rho, form)
    phi = dense_phi(m.masks)
    z = (v - dual / rho if form == UNSCALED else v - dual).ravel()
    oracle = np.linalg.solve(phi.T @ phi + rho * np.eye(n * B), phi.T @ y + rho * z)
    np.testing.assert_allclose(x.ravel(), oracle, atol=1e-9)
    grad = phi.T @ (phi @ x.ravel() - y) + rho * (x.ravel() - z)
    assert np.linalg.norm(grad) <= 1e-8


def test_admm_v_update_examples():
    x = np.array([1.0, -2.0])
    u = np.array([0.5, 0.5])
    np.testing.assert_allclose(admm_v_update(Regularizer("zero"), x, u, 2.0), x + u / 2)
    np.testing.assert_allclose(admm_v_update(Regularizer("l1", 1.0), [2.0, -0.5], [0.0, 0.0], 1.0), [1.0, 0.0])
    r = Regularizer("l1", 0.3)
    np.testing.assert_array_equal(admm_v_update(r, x, u, 2.0, UNSCALED), admm_v_update(r, x, u / 2.0, 2.0, SCALED))


def test_dual_updates():
    x = np.array([1.0, 2.0])
    np.testing.assert_array_equal(admm_u_update([0.3, 0.4], x, x, 2.0), [0.3, 0.4])
    np.testing.assert_array_equal(admm_u_update([0.0, 0.0], [1.0, -1.0], [0.0, 0.0], 2.0), [2.0, -2.0])
    np.testing.assert_array_equal(admm_w_update([0.5, 0.5], [1.0, -1.0], [0.0, 0.0]), [1.5, -0.5])


@given(st.integers(0, 2**31), st.floats(0.2, 5), st.sampled_from(["zero", "tikhonov", "l1"]))
def test_admm_forms_lockstep(seed, rho, kind):
    m, y, _ = small_instance(seed, 6, 3)
    r = Regularizer(kind, 0.4)
    x0 = phi_adjoint(m, y)
    a = AdmmState(x0, x0.copy(), np.zeros_like(x0), UNSCALED)
    b = AdmmState(x0, x0.copy(), np.zeros_like(x0), SCALED)
    for _ in range(30):
        a = admm_step(m, y, a, r, rho)
        b = admm_step(m, y, b, r, rho)
        np.testing.assert_allclose(a.x, b.x, atol=1e-12)
        np.testing.assert_allclose(a.dual / rho, b.dual, atol=1e-12)


def test_run_admm_tikhonov_oracle():
    m, y, _ = small_instance(5)
    x, trace = run_admm(m, y, Regularizer("tikhonov", 0.5), SolverConfig(rho=1.0, max_iters=5000, tol=1e-13))
    assert np.max(np.abs(x - tikhonov_solution(m.masks, y, 0.5))) <= 1e-6
    assert "primal_residual" in trace[0].extra


def test_run_admm_zero_regularizer_feasible():
    m, x_true, y = generate_instance(16, 2, seed=1)
    x, trace = run_admm(m, y, Regularizer("zero"), SolverConfig(rho=1.0, max_iters=3000, tol=1e-14))
    assert trace[-1].extra["primal_residual"] <= 1e-8
    assert np.max(np.abs(phi_apply(m, x) - y)) <= 1e-6


def test_run_admm_callback():
    m, y, _ = small_instance(6)
    seen = []
    run_admm(m, y, Regularizer("l1", 0.1), SolverConfig(max_iters=5, tol=0), callback=lambda k, s: seen.append(k))
    assert seen == [1, 2, 3, 4, 5]


def test_gap_step_identity_is_projection():
    m, y, rng = small_instance(7)
    x = rng.standard_normal((2, 4))
    once = gap_step(m, y, x, identity_denoiser)
    np.testing.assert_allclose(phi_apply(m, once), y, atol=1e-12)
    np.testing.assert_allclose(gap_step(m, y, once, identity_denoiser), once, atol=1e-12)


def test_gap_step_composes_projection_and_denoiser():
    m, y, rng = small_instance(8)
    x = rng.standard_normal((2, 4))
    phi = dense_phi(m.masks)
    proj = x.ravel() + phi.T @ np.linalg.solve(phi @ phi.T, y - phi @ x.ravel())
    np.testing.assert_allclose(gap_step(m, y, x, tikhonov_denoiser(1.0, 1.0)).ravel(), proj / 2, atol=1e-12)


def test_run_gap_identity_one_step():
    m, x_true, y = generate_instance(16, 3, seed=2)
    x, trace = run_gap(m, y, identity_denoiser, SolverConfig(max_iters=10, tol=1e-12))
    assert trace.iterations <= 2
    np.testing.assert_allclose(x, project_onto_manifold(m, phi_adjoint(m, y), y), atol=1e-12)


def test_run_gap_projection_residual_and_psnr():
    m, x_true, y = generate_instance(256, 4, seed=0)
    den = gaussian_denoiser(1.0, blend=0.5)
    seen = []

    def recording(v):
        seen.append(np.linalg.norm(y - phi_apply(m, v)))
        return den(v)

    x, trace = run_gap(m, y, recording, SolverConfig(max_iters=30, tol=1e-10))
    assert max(seen) <= 1e-10
    assert "measurement_residual" in trace[0].extra
    assert psnr(x, x_true) > psnr(phi_adjoint(m, y), x_true)
