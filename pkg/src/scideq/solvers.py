"""Classical SCI reconstruction: gradient descent, ADMM and GAP.

Every solver starts from ``x0 = Phi^T y`` and stops once the normalised
iterate change ``||x_{k+1} - x_k|| / sqrt(nB)`` drops below ``cfg.tol`` or
``cfg.max_iters`` steps have been taken.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import Diverged
from .regularizers import Regularizer, reg_grad, reg_prox, reg_value
from .sensing import (
    MaskSet,
    gram_diagonal,
    phi_adjoint,
    phi_apply,
    project_onto_manifold,
)
from .trace import FixedPointTrace

DIVERGENCE_LIMIT = 1e12

UNSCALED = "unscaled"
SCALED = "scaled"

Denoiser = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SolverConfig:
    step_alpha: float = 0.25
    rho: float = 1.0
    max_iters: int = 500
    tol: float = 1e-8

    def __post_init__(self):
        if not self.step_alpha > 0:
            raise ValueError("step_alpha must be positive")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol >= 0:
            raise ValueError("tol must be >= 0")


@dataclass
class AdmmState:
    x: np.ndarray
    v: np.ndarray
    dual: np.ndarray  # u when form == "unscaled", w = u / rho when "scaled"
    form: str = UNSCALED


def fidelity(m: MaskSet, y, x) -> float:
    r = np.asarray(y, dtype=float) - phi_apply(m, x)
    return 0.5 * float(r @ r)


def objective(m: MaskSet, y, x, r: Regularizer) -> float:
    return fidelity(m, y, x) + reg_value(r, x)


def safe_step(m: MaskSet, r: Regularizer) -> float:
    """``1 / L`` with ``L = ||Phi^T Phi|| + tau`` the gradient Lipschitz constant."""
    lip = float(np.max(gram_diagonal(m)))
    if r.kind == "tikhonov":
        lip += r.tau
    return 1.0 / lip


def _check_form(form: str) -> str:
    if form not in (UNSCALED, SCALED):
        raise ValueError(f"form must be {UNSCALED!r} or {SCALED!r}, got {form!r}")
    return form


def _guard(obj: float, trace: FixedPointTrace, what: str):
    if not np.isfinite(obj) or obj > DIVERGENCE_LIMIT:
        raise Diverged(f"{what} diverged: objective {obj:.3e}", trace)


# --- gradient descent ---------------------------------------------------------

def gd_step(m: MaskSet, y, x, r: Regularizer, alpha: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    resid = np.asarray(y, dtype=float) - phi_apply(m, x)
    return x + alpha * phi_adjoint(m, resid) - alpha * reg_grad(r, x)


def run_gd(m: MaskSet, y, r: Regularizer, cfg: SolverConfig):
    x = phi_adjoint(m, y)
    scale = np.sqrt(x.size)
    trace = FixedPointTrace()
    for k in range(1, cfg.max_iters + 1):
        x_new = gd_step(m, y, x, r, cfg.step_alpha)
        change = float(np.linalg.norm(x_new - x))
        fid = fidelity(m, y, x_new)
        obj = fid + reg_value(r, x_new)
        trace.add(k, change, fid, obj)
        _guard(obj, trace, "gradient descent")
        x = x_new
        if change / scale < cfg.tol:
            trace.converged = True
            break
    return x, trace


# --- ADMM ---------------------------------------------------------------------

def admm_x_update(m: MaskSet, y, v, dual, rho: float, form: str = UNSCALED) -> np.ndarray:
    """Closed-form ``(Phi^T Phi + rho I)^{-1} (Phi^T y + rho z)``.

    ``z = v - u / rho`` (unscaled) or ``z = v - w`` (scaled). The inverse is
    applied through Woodbury, ``(1/rho) [I - Phi^T (rho I + Phi Phi^T)^{-1} Phi]``,
    which only needs the diagonal of ``Phi Phi^T``.
    """
    form = _check_form(form)
    v = np.asarray(v, dtype=float)
    dual = np.asarray(dual, dtype=float)
    z = v - dual / rho if form == UNSCALED else v - dual
    rhs = phi_adjoint(m, y) + rho * z
    inner = phi_apply(m, rhs) / (rho + gram_diagonal(m))
    return (rhs - phi_adjoint(m, inner)) / rho


def admm_v_update(r: Regularizer, x, dual, rho: float, form: str = UNSCALED) -> np.ndarray:
    form = _check_form(form)
    x = np.asarray(x, dtype=float)
    dual = np.asarray(dual, dtype=float)
    z = x + dual / rho if form == UNSCALED else x + dual
    return reg_prox(r, z, rho)


def admm_u_update(u, x, v, rho: float) -> np.ndarray:
    return np.asarray(u, dtype=float) + rho * (np.asarray(x) - np.asarray(v))


def admm_w_update(w, x, v) -> np.ndarray:
    return np.asarray(w, dtype=float) + (np.asarray(x) - np.asarray(v))


def admm_step(m: MaskSet, y, state: AdmmState, r: Regularizer, rho: float) -> AdmmState:
    """One x / v / dual sweep in either form."""
    x = admm_x_update(m, y, state.v, state.dual, rho, state.form)
    v = admm_v_update(r, x, state.dual, rho, state.form)
    if state.form == UNSCALED:
        dual = admm_u_update(state.dual, x, v, rho)
    else:
        dual = admm_w_update(state.dual, x, v)
    return AdmmState(x, v, dual, state.form)


def admm_scaled_step(m: MaskSet, y, x, v, w, r: Regularizer, rho: float) -> AdmmState:
    return admm_step(m, y, AdmmState(x, v, w, SCALED), r, rho)


def run_admm(
    m: MaskSet,
    y,
    r: Regularizer,
    cfg: SolverConfig,
    form: str = UNSCALED,
    callback: Optional[Callable[[int, AdmmState], None]] = None,
):
    """ADMM from ``x = v = Phi^T y`` and a zero dual.

    The trace's ``residual`` column is the iterate change; the primal
    residual ``||x - v||`` goes in the extra ``primal_residual`` column.
    Both must fall below ``tol`` (normalized by ``sqrt(nB)``) to stop, since
    ``x`` can stall for a sweep while ``v`` and the dual are still moving.
    ``callback(k, state)`` is invoked after every sweep.
    """
    form = _check_form(form)
    x0 = phi_adjoint(m, y)
    state = AdmmState(x0, x0.copy(), np.zeros_like(x0), form)
    scale = np.sqrt(x0.size)
    trace = FixedPointTrace()
    for k in range(1, cfg.max_iters + 1):
        new = admm_step(m, y, state, r, cfg.rho)
        change = float(np.linalg.norm(new.x - state.x))
        fid = fidelity(m, y, new.x)
        obj = fid + reg_value(r, new.x)
        primal = float(np.linalg.norm(new.x - new.v))
        trace.add(k, change, fid, obj, primal_residual=primal)
        _guard(obj, trace, "ADMM")
        state = new
        if callback is not None:
            callback(k, state)
        if max(change, primal) / scale < cfg.tol:
            trace.converged = True
            break
    return state.x, trace


# --- GAP ----------------------------------------------------------------------

def gap_step(m: MaskSet, y, x, denoiser: Denoiser) -> np.ndarray:
    return np.asarray(denoiser(project_onto_manifold(m, x, y)), dtype=float)


def run_gap(m: MaskSet, y, denoiser: Denoiser, cfg: SolverConfig):
    """GAP with a plug-in denoiser.

    ``measurement_residual`` in the trace is ``||y - Phi x_k||`` taken before
    that iteration's projection.
    """
    x = phi_adjoint(m, y)
    y = np.asarray(y, dtype=float)
    scale = np.sqrt(x.size)
    trace = FixedPointTrace()
    for k in range(1, cfg.max_iters + 1):
        meas_res = float(np.linalg.norm(y - phi_apply(m, x)))
        x_new = gap_step(m, y, x, denoiser)
        change = float(np.linalg.norm(x_new - x))
        fid = fidelity(m, y, x_new)
        trace.add(k, change, fid, fid, measurement_residual=meas_res)
        _guard(fid, trace, "GAP")
        x = x_new
        if change / scale < cfg.tol:
            trace.converged = True
            break
    return x, trace
