import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import dense_psi as oracle_psi, random_masks
from scideq.deq import DE_GAP, DE_RNN, DeqModel, iteration_map
from scideq.diagnostics import (
    ContractivityReport,
    contractivity_report,
    dense_psi,
    estimate_lipschitz,
    evaluate_bound,
    inequality_chain,
    map_jacobian_norm,
    psi_spectrum,
    psnr,
)
from scideq.errors import DimMismatch, SizeLimitExceeded
from scideq.nets import DENOISER, RNN, init_params, residual_lipschitz, spectral_rescale, zero_params
from scideq.sensing import MaskSet, generate_instance, phi_adjoint


def test_estimate_lipschitz_examples():
    assert estimate_lipschitz(lambda x: x, 5, 4, 0) == pytest.approx(1.0, abs=1e-12)
    assert estimate_lipschitz(lambda x: 0.5 * x, 5, 4, 0) == pytest.approx(0.5, abs=1e-12)
    m, _, y = generate_instance(16, 3, 0)
    f = iteration_map(DeqModel(DE_GAP, zero_params()), m, y)
    assert estimate_lipschitz(f, m.shape, 8, 0) <= 1 + 1e-6
    with pytest.raises(ValueError):
        estimate_lipschitz(lambda x: x, 3, 0)


def test_estimate_lipschitz_lower_bounds_jacobian_norm():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((6, 6))
    f = lambda x: np.tanh(a @ x)
    est = estimate_lipschitz(f, 6, 20, 1)
    assert est <= np.linalg.norm(a, 2) + 1e-3


def test_psi_spectrum_examples():
    np.testing.assert_allclose(psi_spectrum(MaskSet([[1.0], [1.0]])), [0, 1], atol=1e-14)
    np.testing.assert_allclose(psi_spectrum(MaskSet(np.ones((1, 4)))), np.ones(4), atol=1e-14)
    m = MaskSet(random_masks(np.random.default_rng(1), 4, 3))
    lam = psi_spectrum(m)
    assert np.sum(np.abs(lam - 1) < 1e-8) == 4 and np.sum(np.abs(lam) < 1e-8) == 8


@given(st.integers(1, 16), st.integers(1, 4), st.integers(0, 2**31))
def test_psi_is_rank_n_projection(n, B, seed):
    masks = random_masks(np.random.default_rng(seed), n, B, binary=False)
    m = MaskSet(masks)
    np.testing.assert_allclose(dense_psi(m), oracle_psi(masks), atol=1e-10)
    lam = psi_spectrum(m)
    near = np.minimum(np.abs(lam), np.abs(lam - 1))
    assert np.max(near) <= 1e-8
    assert np.sum(np.abs(lam - 1) <= 1e-8) == n
    assert abs(lam.sum() - n) <= 1e-8


def test_psi_size_limit():
    m = MaskSet(np.ones((2, 2100)))
    with pytest.raises(SizeLimitExceeded):
        psi_spectrum(m)


def test_evaluate_bound_examples():
    assert evaluate_bound(0.0, np.ones(4)) == 0.0
    assert evaluate_bound(0.3, [0.0, 1.0]) == pytest.approx(1.3)
    with pytest.raises(ValueError):
        evaluate_bound(-0.1, [0.0])


def test_psnr_examples():
    x = np.random.default_rng(0).uniform(size=(2, 8))
    assert psnr(x, x) == 200.0
    assert psnr(x + 0.1, x) == pytest.approx(20.0)
    y = np.random.default_rng(1).uniform(size=(2, 8))
    mse = sum((a - b) ** 2 for a, b in zip(x.ravel(), y.ravel())) / 16
    assert psnr(x, y, 2.0) == pytest.approx(10 * np.log10(4.0 / mse))
    with pytest.raises(DimMismatch):
        psnr(x, x[:1])


def rescaled_gap(seed=0):
    return DeqModel(DE_GAP, spectral_rescale(init_params(DENOISER, 2, 3, seed=seed), 0.5))


def test_report_end_to_end():
    m, _, y = generate_instance(16, 3, 2)
    model = rescaled_gap()
    report = contractivity_report(model, m, y, pairs=6)
    assert report.epsilon_estimate <= 0.5 + 1e-3
    assert report.bound_value == pytest.approx(1 + report.epsilon_estimate)
    assert report.bound_below_one is False
    assert report.psi_ones == 16
    assert report.bound_value >= report.lipschitz_estimate - 1e-3
    back = ContractivityReport.from_json(report.to_json())
    assert back.to_dict() == report.to_dict()


def test_report_zero_params_and_skip_psi():
    m, _, y = generate_instance(16, 2, 3)
    report = contractivity_report(DeqModel(DE_GAP, zero_params()), m, y)
    assert report.epsilon_estimate == 0.0
    assert report.bound_value == pytest.approx(1.0)
    assert report.lipschitz_estimate <= 1 + 1e-6
    skipped = contractivity_report(DeqModel(DE_GAP, zero_params()), m, y, skip_psi=True)
    d = json.loads(skipped.to_json())
    assert "bound_value" not in d and "psi_eigen_range" not in d


def test_report_rnn():
    m, _, y = generate_instance(16, 2, 4)
    model = DeqModel(DE_RNN, spectral_rescale(init_params(RNN, 2, 3, seed=1), 0.5))
    report = contractivity_report(model, m, y)
    assert report.map_kind == DE_RNN and report.lipschitz_estimate > 0


def test_report_invariants():
    with pytest.raises(ValueError):
        ContractivityReport(DE_GAP, -1.0, 0.0, 0.0, 1)
    with pytest.raises(ValueError):
        ContractivityReport(DE_GAP, 1.0, 1.0, 0.0, 1, psi_eigen_range=(-0.5, 1.0))


def test_jacobian_norm_upper_bounds_pairs():
    m, _, y = generate_instance(16, 2, 5)
    model = rescaled_gap(1)
    x = phi_adjoint(m, y)
    jac = map_jacobian_norm(model, m, y, x)
    assert jac <= 1 + 0.5 + 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_inequality_chain(seed):
    m, _, y = generate_instance(16, 2, seed)
    model = rescaled_gap(seed)
    steps = inequality_chain(model, m, y, phi_adjoint(m, y))
    assert len(steps) == 6
    # every link up to (1 + eps)(1 + ||Psi||) holds numerically
    assert all(s.holds for s in steps[:-1])
    # the final link compares 2(1 + eps) against (1 + eps) and cannot hold for B >= 2
    assert not steps[-1].holds
    assert steps[-1].lhs == pytest.approx(2 * steps[-1].rhs)
