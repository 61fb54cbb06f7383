"""Regularizers R(x) with their gradients and proximal maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotDifferentiable

KINDS = ("zero", "tikhonov", "l1")


@dataclass(frozen=True)
class Regularizer:
    kind: str = "zero"
    tau: float = 0.0

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in KINDS:
            raise ValueError(f"unknown regularizer {self.kind!r}; choose from {KINDS}")
        if not self.tau >= 0:
            raise ValueError("tau must be nonnegative")
        object.__setattr__(self, "kind", kind)

    @property
    def differentiable(self) -> bool:
        return self.kind != "l1"


def reg_value(r: Regularizer, x) -> float:
    x = np.asarray(x, dtype=float)
    if r.kind == "zero":
        return 0.0
    if r.kind == "tikhonov":
        return 0.5 * r.tau * float(np.vdot(x, x))
    return r.tau * float(np.sum(np.abs(x)))


def reg_grad(r: Regularizer, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if r.kind == "zero":
        return np.zeros_like(x)
    if r.kind == "tikhonov":
        return r.tau * x
    raise NotDifferentiable("the l1 regularizer has no gradient; use its prox")


def soft_threshold(z, thresh: float) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.maximum(np.abs(z) - thresh, 0.0)


def reg_prox(r: Regularizer, z, rho: float) -> np.ndarray:
    """``argmin_v R(v) + (rho/2) ||v - z||^2``."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    z = np.asarray(z, dtype=float)
    if r.kind == "zero":
        return z.copy()
    if r.kind == "tikhonov":
        return rho * z / (rho + r.tau)
    return soft_threshold(z, r.tau / rho)


# --- fixed plug-in denoisers for GAP -----------------------------------------

def identity_denoiser(x) -> np.ndarray:
    return np.array(x, dtype=float)


def tikhonov_denoiser(tau: float, rho: float = 1.0):
    """Shrinkage ``rho x / (rho + tau)``, the Tikhonov prox used as a denoiser."""
    reg = Regularizer("tikhonov", tau)
    return lambda x: reg_prox(reg, x, rho)


def gaussian_denoiser(sigma: float, blend: float = 1.0):
    """Per-frame separable Gaussian blur, mixed with the input by ``blend``.

    Frames must be square images (``n`` a perfect square); otherwise each
    frame is blurred as a 1-D signal.
    """
    radius = max(1, int(np.ceil(3 * sigma)))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()

    def blur_axis(a, axis):
        pad = [(0, 0)] * a.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(a, pad, mode="reflect" if a.shape[axis] > radius else "edge")
        out = np.zeros_like(a)
        for j, t in enumerate(taps):
            out += t * np.take(padded, np.arange(j, j + a.shape[axis]), axis=axis)
        return out

    def denoise(x):
        x = np.asarray(x, dtype=float)
        B, n = x.shape
        side = int(np.sqrt(n))
        if side * side == n:
            frames = blur_axis(blur_axis(x.reshape(B, side, side), 1), 2).reshape(B, n)
        else:
            frames = blur_axis(x, 1)
        return blend * frames + (1.0 - blend) * x

    return denoise
