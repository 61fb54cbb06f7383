import numpy as np
import pytest

from oracles import central_jacobian, random_masks, rel_err
from scideq.deq import (
    DE_GAP,
    DE_RNN,
    DeqModel,
    EquilibriumLinearization,
    FixedPointBackward,
    NeumannBackward,
    TrainConfig,
    TrainHistory,
    backward_fixed_point,
    backward_neumann,
    batch_indices,
    degap_apply,
    deq_forward,
    dernn_apply,
    iteration_map,
    loss_and_gradient,
    make_dataset,
    mse_grad,
    mse_loss,
    param_gradient,
    train,
)
from scideq.errors import DimMismatch, NotConverged, TrainingFailed
from scideq.fixedpoint import AndersonConfig, solve_anderson
from scideq.nets import DENOISER, RNN, denoiser_forward, init_params, rnn_forward, spectral_rescale, zero_params
from scideq.sensing import MaskSet, generate_instance, phi_adjoint, phi_apply, project_onto_manifold

TIGHT = AndersonConfig(s=3, delta=1.0, max_iters=500, tol=1e-12)


def instance(seed=0, n=16, B=2):
    rng = np.random.default_rng(seed)
    m = MaskSet(random_masks(rng, n, B))
    x_true = rng.uniform(size=(B, n))
    return m, x_true, phi_apply(m, x_true)


def rescaled_model(kind, seed=0, target=0.5, fwd=TIGHT):
    variant = DENOISER if kind == DE_GAP else RNN
    p = spectral_rescale(init_params(variant, 2, 3, seed=seed), target)
    return DeqModel(kind, p, fwd)


def test_model_validation():
    with pytest.raises(ValueError):
        DeqModel("de-foo", zero_params())
    with pytest.raises(ValueError):
        DeqModel(DE_RNN, zero_params(DENOISER))
    with pytest.raises(ValueError):
        NeumannBackward(0)


def test_degap_zero_is_projection():
    m, _, y = instance()
    model = DeqModel(DE_GAP, zero_params())
    x = np.random.default_rng(1).standard_normal(m.shape)
    np.testing.assert_allclose(degap_apply(model, x, m, y), project_onto_manifold(m, x, y))
    on = project_onto_manifold(m, x, y)
    np.testing.assert_allclose(degap_apply(model, on, m, y), on, atol=1e-12)


def test_maps_compose_module_calls():
    m, _, y = instance(2)
    x = np.random.default_rng(3).standard_normal(m.shape)
    gap = rescaled_model(DE_GAP, 1)
    expected = denoiser_forward(gap.params, project_onto_manifold(m, x, y))
    np.testing.assert_array_equal(degap_apply(gap, x, m, y), expected)
    rnn = rescaled_model(DE_RNN, 1)
    np.testing.assert_array_equal(dernn_apply(rnn, x, m, y), rnn_forward(rnn.params, x, m, y))
    with pytest.raises(ValueError):
        degap_apply(rnn, x, m, y)


def test_forward_zero_params_projection():
    m, _, y = instance(4)
    xhat, trace = deq_forward(DeqModel(DE_GAP, zero_params()), m, y)
    assert trace.iterations <= 2
    np.testing.assert_allclose(xhat, project_onto_manifold(m, phi_adjoint(m, y), y), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("kind", [DE_GAP, DE_RNN])
def test_forward_converges_and_is_certified(kind, seed):
    m, _, y = generate_instance(64, 3, seed)
    model = rescaled_model(kind, seed, fwd=AndersonConfig(3, 1.0, 300, 1e-8))
    xhat, trace = deq_forward(model, m, y)
    f = iteration_map(model, m, y)
    assert np.linalg.norm(f(xhat) - xhat) / np.sqrt(xhat.size) < 1e-8
    again, _ = deq_forward(model, m, y)
    np.testing.assert_array_equal(xhat, again)


def test_forward_budget_raises_with_trace():
    m, _, y = instance(5)
    model = rescaled_model(DE_GAP, fwd=AndersonConfig(3, 1.0, 3, 1e-14))
    with pytest.raises(NotConverged) as info:
        deq_forward(model, m, y)
    assert info.value.trace.iterations == 3 and info.value.x.shape == m.shape


def test_mse():
    assert mse_loss(np.ones(3), np.ones(3)) == 0.0
    assert mse_loss([1.0, 1.0], [0.0, 0.0]) == 1.0
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 5, 7))
    assert mse_loss(a, b) == pytest.approx(sum(0.5 * (p - q) ** 2 for p, q in zip(a.ravel(), b.ravel())))
    np.testing.assert_array_equal(mse_grad(a, b), a - b)
    with pytest.raises(DimMismatch):
        mse_loss(np.ones(2), np.ones(3))


def test_linear_backward_scalar():
    # a = w a + g with w = 0.5, g = 2 has a = g / (1 - w) = 4; and for f(x) = w x + b with
    # b = 1, x* = 0, the equilibrium is x = 2 and dl/db = (x - x*) / (1 - w) = 4
    a, trace = solve_anderson(lambda a: 0.5 * a + 2.0, np.zeros(1), AndersonConfig(3, 1.0, 50, 1e-12))
    assert a[0] == pytest.approx(4.0, abs=1e-10)
    partial = sum(0.5 ** p * 2.0 for p in range(10))
    assert partial == pytest.approx(3.99609375)


def dense_jacobian(model, m, y, xhat):
    lin = EquilibriumLinearization(model, m, y, xhat)
    eye = np.eye(xhat.size)
    return np.stack([lin.j(e.reshape(xhat.shape)).ravel() for e in eye], axis=1)


@pytest.mark.parametrize("kind", [DE_GAP, DE_RNN])
def test_jacobian_products_match_finite_differences(kind):
    m, x_true, y = instance(6)
    model = rescaled_model(kind, 2)
    xhat, _ = deq_forward(model, m, y)
    fd = central_jacobian(iteration_map(model, m, y), xhat)
    J = dense_jacobian(model, m, y, xhat)
    assert rel_err(J, fd) <= 1e-6
    lin = EquilibriumLinearization(model, m, y, xhat)
    a = np.random.default_rng(0).standard_normal(xhat.shape)
    np.testing.assert_allclose(lin.jt(a).ravel(), J.T @ a.ravel(), atol=1e-12)


@pytest.mark.parametrize("kind", [DE_GAP, DE_RNN])
def test_backward_methods_match_dense_oracle(kind):
    m, x_true, y = instance(7)
    model = rescaled_model(kind, 3)
    xhat, _ = deq_forward(model, m, y)
    g = mse_grad(xhat, x_true)
    J = dense_jacobian(model, m, y, xhat)
    oracle = np.linalg.solve(np.eye(J.shape[0]) - J.T, g.ravel())
    a, trace = backward_fixed_point(model, m, y, xhat, g, AndersonConfig(3, 1.0, 500, 1e-12))
    np.testing.assert_allclose(a.ravel(), oracle, atol=1e-9)
    lin = EquilibriumLinearization(model, m, y, xhat)
    assert np.linalg.norm(a - lin.jt(a) - g) / np.sqrt(a.size) < 1e-12
    series = backward_neumann(model, m, y, xhat, g, 10)
    expected = sum(np.linalg.matrix_power(J.T, p) @ g.ravel() for p in range(10))
    np.testing.assert_allclose(series.ravel(), expected, atol=1e-12)
    np.testing.assert_array_equal(backward_neumann(model, m, y, xhat, g, 1), g)


def test_neumann_truncation_bound():
    m, x_true, y = instance(8)
    model = rescaled_model(DE_GAP, 4)
    xhat, _ = deq_forward(model, m, y)
    g = mse_grad(xhat, x_true)
    J = dense_jacobian(model, m, y, xhat)
    norm = np.linalg.norm(J, 2)
    exact = np.linalg.solve(np.eye(J.shape[0]) - J.T, g.ravel())
    for P in (5, 20):
        err = np.linalg.norm(backward_neumann(model, m, y, xhat, g, P).ravel() - exact)
        assert err <= norm ** P * np.linalg.norm(g) / (1 - norm) + 1e-12


def test_backward_budget_raises():
    m, x_true, y = instance(9)
    model = rescaled_model(DE_GAP, 5)
    xhat, _ = deq_forward(model, m, y)
    with pytest.raises(NotConverged):
        backward_fixed_point(model, m, y, xhat, xhat - x_true, AndersonConfig(1, 1.0, 2, 1e-14))


def test_param_gradient_zero_adjoint():
    m, _, y = instance(10)
    model = rescaled_model(DE_GAP)
    xhat, _ = deq_forward(model, m, y)
    np.testing.assert_array_equal(param_gradient(model, m, y, xhat, np.zeros_like(xhat)), 0)


@pytest.mark.parametrize("kind", [DE_GAP, DE_RNN])
@pytest.mark.parametrize("backward", [FixedPointBackward(AndersonConfig(3, 1.0, 500, 1e-12)), NeumannBackward(80)])
def test_implicit_gradient_matches_finite_differences(kind, backward):
    m, x_true, y = instance(11)
    base = rescaled_model(kind, 6)
    model = DeqModel(kind, base.params, TIGHT, backward)
    res = loss_and_gradient(model, m, y, x_true)
    rng = np.random.default_rng(0)
    h = 1e-5
    for i in rng.choice(model.params.theta.size, size=10, replace=False):
        e = np.zeros_like(model.params.theta)
        e[i] = h

        def loss_at(theta):
            xh, _ = deq_forward(model.with_params(model.params.with_theta(theta)), m, y)
            return mse_loss(xh, x_true)

        fd = (loss_at(model.params.theta + e) - loss_at(model.params.theta - e)) / (2 * h)
        assert abs(res.grad[i] - fd) <= 1e-3 * max(abs(fd), 1e-3)


def test_dataset_and_batches_deterministic():
    a = make_dataset(16, 2, 3, seed=5)
    b = make_dataset(16, 2, 3, seed=5)
    for s, t in zip(a, b):
        np.testing.assert_array_equal(s.truth, t.truth)
    assert not np.array_equal(a[0].truth, a[1].truth)
    np.testing.assert_array_equal(batch_indices(8, 3, 0, 4), batch_indices(8, 3, 0, 4))
    np.testing.assert_array_equal(batch_indices(4, 8, 0, 1), np.arange(4))
    assert len(set(batch_indices(8, 3, 0, 4))) == 3


def small_training(steps=10, lr=1e-3, **kw):
    ds = make_dataset(16, 2, kw.pop("samples", 1), seed=0)
    model = DeqModel(DE_GAP, init_params(DENOISER, 2, 3, seed=0))
    cfg = TrainConfig(learning_rate=lr, steps=steps, batch=kw.pop("batch", 1), seed=0, **kw)
    return model, ds, cfg


def test_train_lr_zero_keeps_params():
    model, ds, cfg = small_training(steps=4, lr=0.0)
    p, hist = train(model, ds, cfg)
    p0, _ = train(model, ds, TrainConfig(learning_rate=0.0, steps=0))
    np.testing.assert_array_equal(p.theta, p0.theta)
    assert len(set(hist.losses)) == 1


def test_train_single_sample_loss_decreases():
    model, ds, cfg = small_training(steps=10, lr=1e-3)
    _, hist = train(model, ds, cfg)
    losses = hist.losses
    assert len(losses) == 10
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_train_deterministic_resume_and_jobs():
    model, ds, cfg = small_training(steps=6, lr=1e-3, samples=4, batch=2)
    p_full, h_full = train(model, ds, cfg)
    p_again, h_again = train(model, ds, cfg)
    assert h_full.to_csv() == h_again.to_csv()
    half = TrainConfig(learning_rate=1e-3, steps=3, batch=2, seed=0)
    p_half, h_half = train(model, ds, half)
    p_rest, h_rest = train(model.with_params(p_half), ds, cfg, start_step=3, history=h_half, prepared=True)
    assert h_rest.to_csv() == h_full.to_csv()
    np.testing.assert_array_equal(p_rest.theta, p_full.theta)
    par = TrainConfig(learning_rate=1e-3, steps=6, batch=2, seed=0, jobs=2)
    p_par, h_par = train(model, ds, par)
    assert h_par.to_csv() == h_full.to_csv()


def test_history_csv_round_trip():
    model, ds, cfg = small_training(steps=3)
    _, hist = train(model, ds, cfg)
    text = hist.to_csv()
    assert text.splitlines()[0] == "step,loss,forward_iters,backward_iters,grad_norm"
    assert TrainHistory.from_csv(text).to_csv() == text


def test_train_fails_after_three_aborts():
    model, ds, cfg = small_training(steps=20, lr=50.0)
    with pytest.raises(TrainingFailed) as info:
        train(model, ds, cfg)
    hist = info.value.history
    assert [r.aborted for r in hist.records[-3:]] == [True, True, True]
    assert info.value.params is not None


def test_train_rejects_empty_dataset():
    model, _, cfg = small_training()
    with pytest.raises(ValueError):
        train(model, [], cfg)
