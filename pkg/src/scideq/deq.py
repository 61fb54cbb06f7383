"""Deep-equilibrium reconstruction (DE-GAP and DE-RNN) with implicit gradients.

The forward pass finds ``x_hat = f(x_hat)`` with Anderson acceleration from
``Phi^T y``. The backward pass solves ``a = J^T a + (x_hat - x_star)``, with
``J`` the Jacobian of the iteration map at ``x_hat``, either by the same
fixed-point engine or by a truncated Neumann series, and then forms
``dloss/dtheta = (df/dtheta)^T a``.
"""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DimMismatch, NotConverged, TrainingFailed
from .fixedpoint import AndersonConfig, solve_anderson
from .nets import DENOISER, RNN, DenoiserParams, Linearization, spectral_rescale
from .sensing import MaskSet, generate_instance, phi_adjoint, phi_apply, project_onto_manifold, psi_apply

log = logging.getLogger(__name__)

DE_GAP = "de-gap"
DE_RNN = "de-rnn"
_VARIANT_FOR = {DE_GAP: DENOISER, DE_RNN: RNN}


@dataclass(frozen=True)
class FixedPointBackward:
    cfg: AndersonConfig = AndersonConfig(s=3, delta=1.0, max_iters=200, tol=1e-8)


@dataclass(frozen=True)
class NeumannBackward:
    terms: int = 30

    def __post_init__(self):
        if self.terms < 1:
            raise ValueError("Neumann truncation needs at least one term")


@dataclass(frozen=True)
class DeqModel:
    map_kind: str
    params: DenoiserParams
    forward_cfg: AndersonConfig = AndersonConfig(s=3, delta=1.0, max_iters=100, tol=1e-6)
    backward: Union[FixedPointBackward, NeumannBackward] = FixedPointBackward()

    def __post_init__(self):
        if self.map_kind not in _VARIANT_FOR:
            raise ValueError(f"map_kind must be {DE_GAP!r} or {DE_RNN!r}")
        if self.params.variant != _VARIANT_FOR[self.map_kind]:
            raise ValueError(f"{self.map_kind} needs {_VARIANT_FOR[self.map_kind]!r} parameters")

    def with_params(self, params: DenoiserParams) -> "DeqModel":
        return DeqModel(self.map_kind, params, self.forward_cfg, self.backward)


# --- iteration maps -------------------------------------------------------------

def degap_apply(model: DeqModel, x, m: MaskSet, y) -> np.ndarray:
    """``D(x + Phi^T (Phi Phi^T)^{-1} (y - Phi x))``."""
    if model.map_kind != DE_GAP:
        raise ValueError("degap_apply needs a de-gap model")
    return Linearization(model.params, project_onto_manifold(m, x, y)).output


def dernn_apply(model: DeqModel, x, m: MaskSet, y) -> np.ndarray:
    if model.map_kind != DE_RNN:
        raise ValueError("dernn_apply needs a de-rnn model")
    return Linearization(model.params, x, m, y).output


def iteration_map(model: DeqModel, m: MaskSet, y):
    apply = degap_apply if model.map_kind == DE_GAP else dernn_apply
    return lambda x: apply(model, x, m, y)


def deq_forward(model: DeqModel, m: MaskSet, y):
    """Equilibrium of the iteration map from ``Phi^T y``; raises NotConverged on budget exhaustion."""
    f = iteration_map(model, m, y)
    y = np.asarray(y, dtype=float)

    def monitor(x):
        r = y - phi_apply(m, x)
        fid = 0.5 * float(r @ r)
        return fid, fid

    xhat, trace = solve_anderson(f, phi_adjoint(m, y), model.forward_cfg, monitor)
    if not trace.converged:
        raise NotConverged(
            f"forward solve did not reach tol {model.forward_cfg.tol:g} in "
            f"{model.forward_cfg.max_iters} iterations (residual {trace.final_residual:.3e})",
            trace, xhat,
        )
    return xhat, trace


# --- loss and backward ----------------------------------------------------------

def mse_loss(xhat, xstar) -> float:
    xhat = np.asarray(xhat, dtype=float)
    xstar = np.asarray(xstar, dtype=float)
    if xhat.shape != xstar.shape:
        raise DimMismatch(f"shapes {xhat.shape} and {xstar.shape} differ")
    d = xhat - xstar
    return 0.5 * float(np.vdot(d, d))


def mse_grad(xhat, xstar) -> np.ndarray:
    return np.asarray(xhat, dtype=float) - np.asarray(xstar, dtype=float)


class EquilibriumLinearization:
    """Jacobian products of the iteration map at a fixed point.

    For DE-GAP the network is linearised at the projected point and
    ``J = J_D (I - Psi)``; for DE-RNN the cell is linearised at ``x_hat``.
    """

    def __init__(self, model: DeqModel, m: MaskSet, y, xhat):
        self.model, self.m = model, m
        if model.map_kind == DE_GAP:
            self.point = project_onto_manifold(m, xhat, y)
            self.net = Linearization(model.params, self.point)
        else:
            self.point = np.asarray(xhat, dtype=float)
            self.net = Linearization(model.params, self.point, m, y)

    def jt(self, a) -> np.ndarray:
        z = self.net.vjp_input(a)
        if self.model.map_kind == DE_GAP:
            z = z - psi_apply(self.m, z)
        return z

    def j(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.model.map_kind == DE_GAP:
            v = v - psi_apply(self.m, v)
        return self.net.jvp_input(v)

    def params_vjp(self, a) -> np.ndarray:
        return self.net.vjp_params(a)


def backward_fixed_point(model: DeqModel, m: MaskSet, y, xhat, g, cfg: Optional[AndersonConfig] = None):
    """Solve ``a = J^T a + g`` from ``a = 0``; returns ``(a, trace)``."""
    if cfg is None:
        cfg = model.backward.cfg if isinstance(model.backward, FixedPointBackward) else FixedPointBackward().cfg
    lin = EquilibriumLinearization(model, m, y, xhat)
    g = np.asarray(g, dtype=float)
    a, trace = solve_anderson(lambda a: lin.jt(a) + g, np.zeros_like(g), cfg)
    if not trace.converged:
        raise NotConverged(
            f"backward solve did not reach tol {cfg.tol:g} (residual {trace.final_residual:.3e})",
            trace, a,
        )
    return a, trace


def backward_neumann(model: DeqModel, m: MaskSet, y, xhat, g, terms: Optional[int] = None) -> np.ndarray:
    """``sum_{p < terms} (J^T)^p g`` using ``terms - 1`` transpose-Jacobian products."""
    if terms is None:
        terms = model.backward.terms if isinstance(model.backward, NeumannBackward) else NeumannBackward().terms
    if terms < 1:
        raise ValueError("terms must be >= 1")
    lin = EquilibriumLinearization(model, m, y, xhat)
    term = np.array(g, dtype=float)
    total = term.copy()
    for _ in range(terms - 1):
        term = lin.jt(term)
        total += term
    return total


def param_gradient(model: DeqModel, m: MaskSet, y, xhat, a_inf) -> np.ndarray:
    return EquilibriumLinearization(model, m, y, xhat).params_vjp(a_inf)


@dataclass
class SampleResult:
    loss: float
    grad: np.ndarray
    xhat: np.ndarray
    forward_iters: int
    backward_iters: int


def loss_and_gradient(model: DeqModel, m: MaskSet, y, xstar) -> SampleResult:
    """Forward solve, loss, configured backward pass and parameter gradient for one sample."""
    xhat, ftrace = deq_forward(model, m, y)
    g = mse_grad(xhat, xstar)
    if isinstance(model.backward, NeumannBackward):
        a = backward_neumann(model, m, y, xhat, g, model.backward.terms)
        biters = model.backward.terms - 1
    else:
        a, btrace = backward_fixed_point(model, m, y, xhat, g)
        biters = btrace.iterations
    grad = param_gradient(model, m, y, xhat, a)
    return SampleResult(mse_loss(xhat, xstar), grad, xhat, ftrace.iterations, biters)


# --- training -------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    masks: MaskSet
    truth: np.ndarray
    y: np.ndarray


def make_dataset(n: int, B: int, count: int, noise_sigma: float = 0.0, seed: int = 0) -> list[Sample]:
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [Sample(*generate_instance(n, B, int(s), noise_sigma)) for s in seeds]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 200
    batch: int = 8
    seed: int = 0
    contraction_target: Optional[float] = 0.5
    rescale_probes: int = 4
    jobs: int = 1
    # dataset spec, used when the trainer generates its own data
    n: int = 256
    B: int = 4
    samples: int = 8
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")


@dataclass
class StepRecord:
    step: int
    loss: float
    forward_iters: int
    backward_iters: int
    grad_norm: float
    aborted: bool = False


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records if not r.aborted]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "forward_iters", "backward_iters", "grad_norm"])
        for r in self.records:
            w.writerow([r.step, repr(r.loss), r.forward_iters, r.backward_iters, repr(r.grad_norm)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        """Inverse of :meth:`to_csv`; rows with a NaN loss are aborted steps."""
        hist = cls()
        for row in csv.DictReader(io.StringIO(text)):
            loss = float(row["loss"])
            hist.records.append(StepRecord(
                int(row["step"]), loss, int(row["forward_iters"]), int(row["backward_iters"]),
                float(row["grad_norm"]), bool(np.isnan(loss)),
            ))
        return hist


def round_params(p: DenoiserParams) -> DenoiserParams:
    """Round theta to float32 so checkpoints restore the exact training state."""
    return p.with_theta(p.theta.astype(np.float32).astype(float))


def batch_indices(n_samples: int, batch: int, seed: int, step: int) -> np.ndarray:
    if batch >= n_samples:
        return np.arange(n_samples)
    rng = np.random.default_rng([seed, step])
    return rng.choice(n_samples, size=batch, replace=False)


def prepare_params(p: DenoiserParams, cfg: TrainConfig) -> DenoiserParams:
    if cfg.contraction_target is not None:
        p = spectral_rescale(p, cfg.contraction_target, cfg.rescale_probes)
    return round_params(p)


def train(model: DeqModel, dataset: Sequence[Sample], cfg: TrainConfig,
          start_step: int = 0, history: Optional[TrainHistory] = None, prepared: bool = False):
    """Plain SGD on the mean batch MSE through the equilibrium.

    Returns ``(params, history)``. Steps run from ``start_step`` to
    ``cfg.steps``; batch selection depends only on ``(cfg.seed, step)`` so a
    resumed run continues exactly like an unbroken one. Pass
    ``prepared=True`` when ``model.params`` already went through
    :func:`prepare_params` (as checkpointed parameters have).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    history = history if history is not None else TrainHistory()
    params = round_params(model.params) if prepared else prepare_params(model.params, cfg)
    failures = 0
    for rec in reversed(history.records):
        if not rec.aborted:
            break
        failures += 1
    pool = ThreadPoolExecutor(cfg.jobs) if cfg.jobs > 1 else None
    try:
        for step in range(start_step, cfg.steps):
            current = model.with_params(params)
            batch = [dataset[i] for i in batch_indices(len(dataset), cfg.batch, cfg.seed, step)]
            run = lambda s: loss_and_gradient(current, s.masks, s.y, s.truth)
            try:
                results = list(pool.map(run, batch)) if pool else [run(s) for s in batch]
            except NotConverged as exc:
                failures += 1
                history.records.append(StepRecord(step, float("nan"), 0, 0, float("nan"), True))
                log.warning("step %d aborted: %s", step, exc)
                if failures >= 3:
                    raise TrainingFailed(
                        f"three consecutive aborted steps ending at step {step}", params, history
                    ) from exc
                continue
            failures = 0
            grad = np.zeros_like(params.theta)
            for r in results:
                grad += r.grad
            grad /= len(results)
            loss = sum(r.loss for r in results) / len(results)
            history.records.append(StepRecord(
                step, loss,
                sum(r.forward_iters for r in results),
                sum(r.backward_iters for r in results),
                float(np.linalg.norm(grad)),
            ))
            params = params.with_theta(params.theta - cfg.learning_rate * grad)
            if cfg.contraction_target is not None:
                params = spectral_rescale(params, cfg.contraction_target, cfg.rescale_probes)
            params = round_params(params)
            if step % 10 == 0 or step == cfg.steps - 1:
                log.info("step %d loss %.6g grad %.3g", step, loss, history.records[-1].grad_norm)
    finally:
        if pool is not None:
            pool.shutdown()
    return params, history
