"""Contractivity instrumentation for the equilibrium iteration maps.

Two Lipschitz estimators are provided: pair sampling, a lower bound on the
true constant, and power iteration on the Jacobian at chosen points. The
projection ``Psi = Phi^T (Phi Phi^T)^{-1} Phi`` is checked by dense
eigendecomposition at oracle scale, and the bound
``eta = (1 + eps) * max_i |1 - lambda_i|`` is evaluated from its spectrum.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .deq import DE_GAP, DeqModel, EquilibriumLinearization, iteration_map
from .errors import DimMismatch, SizeLimitExceeded
from .nets import Linearization, residual_lipschitz
from .numerics import DENSE_LIMIT, power_iteration, sym_eigvals
from .sensing import MaskSet, dense_phi, gram_diagonal, phi_adjoint, project_onto_manifold

PERTURBATION_SCALES = (1e-3, 1e-1, 1.0)
PSNR_CAP = 200.0
EIGEN_TOL = 1e-8


def estimate_lipschitz(fn: Callable[[np.ndarray], np.ndarray], dim: Union[int, Sequence[int]],
                       pairs: int = 8, seed: int = 0) -> float:
    """Largest ``||fn(x) - fn(x')|| / ||x - x'||`` over sampled pairs.

    Each pair draws ``x`` uniformly in ``[0, 1]`` and perturbs it along a
    random unit direction at three magnitudes. The result is a lower bound
    on the Lipschitz constant. Every pair gets its own seed derived from
    ``seed``, so the estimate does not depend on evaluation order.
    """
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    shape = (dim,) if isinstance(dim, (int, np.integer)) else tuple(dim)
    best = 0.0
    for child in np.random.SeedSequence(seed).spawn(pairs):
        rng = np.random.default_rng(child)
        x = rng.uniform(0.0, 1.0, shape)
        u = rng.standard_normal(shape)
        u /= np.linalg.norm(u)
        fx = np.asarray(fn(x), dtype=float)
        for scale in PERTURBATION_SCALES:
            xp = x + scale * u
            step = float(np.linalg.norm(xp - x))
            if step == 0.0:
                continue
            best = max(best, float(np.linalg.norm(np.asarray(fn(xp), dtype=float) - fx)) / step)
    return best


def map_jacobian_norm(model: DeqModel, m: MaskSet, y, x, iters: int = 50, seed: int = 0) -> float:
    """Power-iteration estimate of the iteration-map Jacobian norm at ``x``."""
    lin = EquilibriumLinearization(model, m, y, x)
    shape = m.shape
    return power_iteration(
        lambda v: lin.j(v.reshape(shape)).ravel(),
        m.n * m.B,
        iters,
        seed=seed,
        apply_t=lambda w: lin.jt(w.reshape(shape)).ravel(),
    )


def local_epsilon(model: DeqModel, x, m: Optional[MaskSet] = None, y=None,
                  iters: int = 50, seed: int = 0) -> float:
    """Norm of the residual-branch Jacobian of the network at the cube ``x``."""
    lin = Linearization(model.params, x, m, y)
    shape = np.shape(x)
    size = int(np.prod(shape))

    def fwd(v):
        v = v.reshape(shape)
        return (lin.jvp_input(v) - v).ravel()

    def adj(w):
        w = w.reshape(shape)
        return (lin.vjp_input(w) - w).ravel()

    return power_iteration(fwd, size, iters, seed=seed, apply_t=adj)


def dense_psi(m: MaskSet) -> np.ndarray:
    """Explicit ``Psi`` in frame-major order."""
    phi = dense_phi(m)
    return phi.T @ (phi / gram_diagonal(m)[:, None])


def _check_size(m: MaskSet):
    if m.n * m.B > DENSE_LIMIT:
        raise SizeLimitExceeded(f"nB = {m.n * m.B} exceeds the dense limit {DENSE_LIMIT}")


def psi_spectrum(m: MaskSet) -> np.ndarray:
    """Eigenvalues of ``Psi``, ascending. Raises SizeLimitExceeded above the dense limit."""
    _check_size(m)
    return sym_eigvals(dense_psi(m))


def evaluate_bound(epsilon: float, spectrum) -> float:
    """``(1 + epsilon) * max_i |1 - lambda_i|``."""
    if not epsilon >= 0:
        raise ValueError("epsilon must be >= 0")
    lam = np.asarray(spectrum, dtype=float)
    if lam.size == 0:
        raise ValueError("spectrum is empty")
    return (1.0 + epsilon) * float(np.max(np.abs(1.0 - lam)))


def psnr(x, ref, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 200 for (near) exact matches."""
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise DimMismatch(f"shapes {x.shape} and {ref.shape} differ")
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.sum((x - ref) ** 2)) / x.size
    if mse < 1e-20:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


# --- the inequality chain --------------------------------------------------------

@dataclass
class ChainStep:
    label: str
    lhs: float
    rhs: float
    holds: bool


def _dense_network_jacobian(model: DeqModel, point) -> np.ndarray:
    lin = Linearization(model.params, point)
    shape = np.shape(point)
    size = int(np.prod(shape))
    cols = [lin.jvp_input(e.reshape(shape)).ravel() for e in np.eye(size)]
    return np.stack(cols, axis=1)


def inequality_chain(model: DeqModel, m: MaskSet, y, x, tol: float = 1e-9) -> list[ChainStep]:
    """Evaluate every link of the DE-GAP Jacobian bound at ``x`` with dense matrices.

    ``eps`` is the local norm ``||J_D - I||`` at the projected point, so each
    link is checked with the constant it actually uses. Each step compares
    the previous right-hand side with the next one.
    """
    if model.map_kind != DE_GAP:
        raise ValueError("the chain applies to de-gap maps")
    _check_size(m)
    point = project_onto_manifold(m, x, y)
    jd = _dense_network_jacobian(model, point)
    psi = dense_psi(m)
    eye = np.eye(psi.shape[0])
    norm = lambda a: float(np.linalg.norm(a, 2))
    eps = norm(jd - eye)
    psi_norm = norm(psi)
    lam = sym_eigvals(psi)
    values = [
        ("||J_D (I - Psi)||", norm(jd @ (eye - psi))),
        ("||J_D - I|| + ||I - J_D Psi||", eps + norm(eye - jd @ psi)),
        ("1 + eps + ||J_D Psi||", 1.0 + eps + norm(jd @ psi)),
        ("1 + eps + ||(J_D - I) Psi|| + ||Psi||", 1.0 + eps + norm((jd - eye) @ psi) + psi_norm),
        ("1 + eps + eps ||Psi|| + ||Psi||", 1.0 + eps + eps * psi_norm + psi_norm),
        ("(1 + eps)(1 + ||Psi||)", (1.0 + eps) * (1.0 + psi_norm)),
        ("(1 + eps) max |1 - lambda|", evaluate_bound(eps, lam)),
    ]
    steps = []
    for (_, lhs), (label, rhs) in zip(values, values[1:]):
        steps.append(ChainStep(label, lhs, rhs, lhs <= rhs + tol * max(1.0, abs(rhs))))
    return steps


# --- report ----------------------------------------------------------------------

@dataclass
class ContractivityReport:
    map_kind: str
    lipschitz_estimate: float
    jacobian_estimate: float
    epsilon_estimate: float
    samples: int
    psi_eigen_range: Optional[tuple] = None
    psi_ones: Optional[int] = None
    bound_value: Optional[float] = None
    notes: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("lipschitz_estimate", "jacobian_estimate", "epsilon_estimate"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if self.psi_eigen_range is not None:
            lo, hi = self.psi_eigen_range
            if lo < -EIGEN_TOL or hi > 1.0 + EIGEN_TOL:
                raise ValueError(f"Psi eigenvalues outside [0, 1]: {self.psi_eigen_range}")
            self.psi_eigen_range = (float(lo), float(hi))

    @property
    def bound_below_one(self) -> Optional[bool]:
        return None if self.bound_value is None else self.bound_value < 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["psi_eigen_range"] is None:
            for key in ("psi_eigen_range", "psi_ones", "bound_value"):
                d.pop(key)
        else:
            d["psi_eigen_range"] = list(d["psi_eigen_range"])
            d["bound_below_one"] = self.bound_below_one
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text: str) -> "ContractivityReport":
        d = json.loads(text)
        d.pop("bound_below_one", None)
        if d.get("psi_eigen_range") is not None:
            d["psi_eigen_range"] = tuple(d["psi_eigen_range"])
        return cls(**d)

    def summary(self) -> str:
        parts = [f"{self.map_kind}: lipschitz>={self.lipschitz_estimate:.4f}",
                 f"jacobian~{self.jacobian_estimate:.4f}", f"eps~{self.epsilon_estimate:.4f}"]
        if self.bound_value is not None:
            verdict = "below 1" if self.bound_below_one else "NOT below 1"
            parts.append(f"bound={self.bound_value:.4f} ({verdict})")
        return ", ".join(parts)


def contractivity_report(model: DeqModel, m: MaskSet, y, pairs: int = 8, seed: int = 0,
                         iters: int = 50, skip_psi: bool = False) -> ContractivityReport:
    """Assemble both Lipschitz estimates, eps and, unless skipped, the Psi bound.

    ``eps`` is the larger of the probe-set estimate used by ``spectral_rescale``
    and the local residual-branch norm at the network inputs seen from
    ``Phi^T y``.
    """
    f = iteration_map(model, m, y)
    lip = estimate_lipschitz(f, m.shape, pairs, seed)
    x0 = phi_adjoint(m, y)
    jac = map_jacobian_norm(model, m, y, x0, iters, seed)
    eps_probe = residual_lipschitz(model.params, iters=iters, seed=seed)
    if model.map_kind == DE_GAP:
        eps_local = local_epsilon(model, project_onto_manifold(m, x0, y), iters=iters, seed=seed)
    else:
        eps_local = local_epsilon(model, x0, m, y, iters=iters, seed=seed)
    notes = [
        "lipschitz_estimate is a sampled lower bound on the map constant",
        "jacobian_estimate is the power-iteration norm of the map Jacobian at Phi^T y",
    ]
    report = ContractivityReport(model.map_kind, lip, jac, max(eps_probe, eps_local), pairs, notes=notes)
    if skip_psi:
        report.notes.append("Psi spectrum skipped")
        return report
    lam = psi_spectrum(m)
    report.psi_eigen_range = (float(lam[0]), float(lam[-1]))
    report.psi_ones = int(np.sum(np.abs(lam - 1.0) <= EIGEN_TOL))
    report.bound_value = evaluate_bound(report.epsilon_estimate, lam)
    if not report.bound_below_one:
        report.notes.append("bound is not below 1, so it does not certify a contraction")
    report.__post_init__()
    return report
