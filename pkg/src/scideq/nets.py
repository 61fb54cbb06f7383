"""Two-layer residual convolutional networks with handwritten derivatives.

Both variants share the residual form ``out = x + C2(tanh(C1(inp)))`` where
``C1`` and ``C2`` are zero-padded "same" 2-D convolutions (cross-correlations,
as in most deep learning code) applied to each frame independently:

* ``denoiser``: ``inp`` is the frame itself (one input channel);
* ``rnn``: ``inp`` stacks the frame and the measurement correction
  ``g = Phi^T ((y - Phi x) / diag(Phi Phi^T))`` (two input channels).

The flat parameter vector is laid out as ``W1, b1, W2, b2`` with shapes
``(c, cin, k, k)``, ``(c,)``, ``(1, c, k, k)``, ``(1,)``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NotSquareFrame
from .numerics import power_iteration
from .sensing import MaskSet, frame_side, measurement_correction, psi_apply

DENOISER = "denoiser"
RNN = "rnn"
VARIANTS = (DENOISER, RNN)


@dataclass(frozen=True, eq=False)
class DenoiserParams:
    theta: np.ndarray
    channels: int = 2
    kernel: int = 3
    variant: str = DENOISER
    activation: str = "tanh"
    layers: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be a positive odd number")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.layers != 2 or self.activation != "tanh":
            raise ValueError("only two-layer tanh networks are supported")
        theta = np.array(self.theta, dtype=float).reshape(-1)
        if theta.size != param_count(self.variant, self.channels, self.kernel):
            raise ValueError(
                f"theta has {theta.size} entries, shape implies "
                f"{param_count(self.variant, self.channels, self.kernel)}"
            )
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta has non-finite entries")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def in_channels(self) -> int:
        return 1 if self.variant == DENOISER else 2

    def unpack(self):
        return _unpack(self.theta, self.in_channels, self.channels, self.kernel)

    def with_theta(self, theta) -> "DenoiserParams":
        return DenoiserParams(theta, self.channels, self.kernel, self.variant,
                              self.activation, self.layers)

    def meta(self) -> dict:
        return {"variant": self.variant, "channels": self.channels, "kernel": self.kernel,
                "layers": self.layers, "activation": self.activation,
                "n_params": int(self.theta.size)}


def param_count(variant: str, channels: int, kernel: int) -> int:
    cin = 1 if variant == DENOISER else 2
    return channels * cin * kernel * kernel + channels + channels * kernel * kernel + 1


def _unpack(theta, cin, c, k):
    sizes = [c * cin * k * k, c, c * k * k, 1]
    cuts = np.cumsum(sizes)[:-1]
    w1, b1, w2, b2 = np.split(theta, cuts)
    return w1.reshape(c, cin, k, k), b1, w2.reshape(1, c, k, k), b2


def _pack(w1, b1, w2, b2) -> np.ndarray:
    return np.concatenate([w1.ravel(), b1.ravel(), w2.ravel(), b2.ravel()])


def zero_params(variant: str = DENOISER, channels: int = 2, kernel: int = 3) -> DenoiserParams:
    return DenoiserParams(np.zeros(param_count(variant, channels, kernel)), channels, kernel, variant)


def init_params(variant: str = DENOISER, channels: int = 2, kernel: int = 3, seed: int = 0,
                scale: float = 0.05, shrink: float = 0.5) -> DenoiserParams:
    """Random small weights around a shrinking residual branch.

    The centre taps make the branch behave like ``-shrink * x`` near zero
    (and ``-shrink * (x - g)`` for the rnn cell, which pulls toward the
    projected point), so the fixed-point maps start out contractive.
    """
    rng = np.random.default_rng(seed)
    cin = 1 if variant == DENOISER else 2
    mid = kernel // 2
    w1 = scale * rng.standard_normal((channels, cin, kernel, kernel))
    b1 = np.zeros(channels)
    w2 = scale * rng.standard_normal((1, channels, kernel, kernel))
    b2 = np.zeros(1)
    w1[:, 0, mid, mid] += 1.0
    if cin == 2:
        w1[:, 1, mid, mid] -= 1.0
    w2[0, :, mid, mid] -= shrink / channels
    return DenoiserParams(_pack(w1, b1, w2, b2), channels, kernel, variant)


# --- convolution primitives ---------------------------------------------------

def _patches(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(xp, (k, k), axis=(2, 3))


def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``(B, cin, H, W) -> (B, cout, H, W)`` same-size cross-correlation."""
    return np.einsum("bihwkl,oikl->bohw", _patches(x, w.shape[-1]), w)


def _conv_t(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_conv` with respect to its input."""
    return _conv(g, np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]))


def _conv_wgrad(g: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
    return np.einsum("bohw,bihwkl->oikl", g, _patches(x, k))


class _Branch:
    """Residual branch ``C2(tanh(C1(inp)))`` linearised at ``inp``."""

    def __init__(self, p: DenoiserParams, inp: np.ndarray):
        self.p = p
        self.inp = inp
        self.w1, self.b1, self.w2, self.b2 = p.unpack()
        z1 = _conv(inp, self.w1) + self.b1[None, :, None, None]
        self.h = np.tanh(z1)
        self.dh = 1.0 - self.h * self.h
        self.out = _conv(self.h, self.w2) + self.b2[None, :, None, None]

    def vjp_inp(self, a):
        gz = _conv_t(a, self.w2) * self.dh
        return _conv_t(gz, self.w1)

    def vjp_params(self, a):
        k = self.p.kernel
        gw2 = _conv_wgrad(a, self.h, k)
        gb2 = a.sum(axis=(0, 2, 3))
        gz = _conv_t(a, self.w2) * self.dh
        gw1 = _conv_wgrad(gz, self.inp, k)
        gb1 = gz.sum(axis=(0, 2, 3))
        return _pack(gw1, gb1, gw2, gb2)

    def jvp_inp(self, v):
        return _conv(self.dh * _conv(v, self.w1), self.w2)


def _frames(x: np.ndarray) -> tuple[int, int]:
    if x.ndim != 2:
        raise ValueError(f"expected a (B, n) cube, got shape {x.shape}")
    side = frame_side(x.shape[1])
    if side is None:
        raise NotSquareFrame(f"frame size n={x.shape[1]} is not a perfect square")
    return x.shape[0], side


class Linearization:
    """Network output at a point together with its Jacobian products.

    ``vjp_input``/``jvp_input`` act on ``(B, n)`` cubes; ``vjp_params``
    returns a flat vector shaped like ``theta``.
    """

    def __init__(self, p: DenoiserParams, x, m: MaskSet | None = None, y=None):
        x = np.asarray(x, dtype=float)
        B, side = _frames(x)
        self.p, self.m, self.shape = p, m, x.shape
        self._img = (B, 1, side, side)
        if p.variant == DENOISER:
            inp = x.reshape(self._img)
        else:
            if m is None or y is None:
                raise ValueError("the rnn cell needs masks and a measurement")
            g = measurement_correction(m, x, y)
            inp = np.concatenate([x.reshape(self._img), g.reshape(self._img)], axis=1)
        self.branch = _Branch(p, inp)
        self.output = x + self.branch.out.reshape(self.shape)

    def vjp_input(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float).reshape(self.shape)
        gi = self.branch.vjp_inp(a.reshape(self._img))
        out = a + gi[:, 0].reshape(self.shape)
        if self.p.variant == RNN:
            # dg/dx = -Psi, which is symmetric
            out -= psi_apply(self.m, gi[:, 1].reshape(self.shape))
        return out

    def vjp_params(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float).reshape(self._img)
        return self.branch.vjp_params(a)

    def jvp_input(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float).reshape(self.shape)
        vi = v.reshape(self._img)
        if self.p.variant == RNN:
            dg = -psi_apply(self.m, v).reshape(self._img)
            vi = np.concatenate([vi, dg], axis=1)
        return v + self.branch.jvp_inp(vi).reshape(self.shape)


def _require(p: DenoiserParams, variant: str):
    if p.variant != variant:
        raise ValueError(f"expected {variant!r} parameters, got {p.variant!r}")


def denoiser_forward(p: DenoiserParams, x) -> np.ndarray:
    _require(p, DENOISER)
    return Linearization(p, x).output


def denoiser_vjp_input(p: DenoiserParams, x, a) -> np.ndarray:
    _require(p, DENOISER)
    return Linearization(p, x).vjp_input(a)


def denoiser_vjp_params(p: DenoiserParams, x, a) -> np.ndarray:
    _require(p, DENOISER)
    return Linearization(p, x).vjp_params(a)


def rnn_forward(p: DenoiserParams, x, m: MaskSet, y) -> np.ndarray:
    _require(p, RNN)
    return Linearization(p, x, m, y).output


def rnn_vjp_input(p: DenoiserParams, x, m: MaskSet, y, a) -> np.ndarray:
    _require(p, RNN)
    return Linearization(p, x, m, y).vjp_input(a)


def rnn_vjp_params(p: DenoiserParams, x, m: MaskSet, y, a) -> np.ndarray:
    _require(p, RNN)
    return Linearization(p, x, m, y).vjp_params(a)


# --- Lipschitz control ----------------------------------------------------------

def probe_points(p: DenoiserParams, probes: int, side: int = 16, seed: int = 0) -> list[np.ndarray]:
    """Fixed branch inputs of shape ``(1, cin, side, side)``; the first is all zeros."""
    rng = np.random.default_rng(seed)
    pts = [np.zeros((1, p.in_channels, side, side))]
    for _ in range(max(probes - 1, 0)):
        pt = rng.uniform(0.0, 1.0, (1, p.in_channels, side, side))
        if p.in_channels == 2:
            pt[:, 1] -= 0.5
        pts.append(pt)
    return pts[:max(probes, 1)]


def residual_lipschitz(p: DenoiserParams, probes: int = 4, iters: int = 50,
                       side: int = 16, seed: int = 0) -> float:
    """Largest Jacobian spectral norm of the residual branch over the probe set.

    This is a sampled lower bound on the Lipschitz constant of ``D - I``
    (with respect to the stacked input for the rnn cell).
    """
    best = 0.0
    for pt in probe_points(p, probes, side, seed):
        br = _Branch(p, pt)
        est = power_iteration(
            lambda v: br.jvp_inp(v.reshape(pt.shape)).ravel(),
            pt.size,
            iters,
            seed=seed,
            apply_t=lambda w: br.vjp_inp(w.reshape(br.out.shape)).ravel(),
        )
        best = max(best, est)
    return best


def spectral_rescale(p: DenoiserParams, target: float, probes: int = 4, iters: int = 50,
                     side: int = 16, seed: int = 0) -> DenoiserParams:
    """Scale the last-layer weights so the residual-branch estimate is at most ``target``.

    The branch Jacobian is linear in ``W2``, so scaling ``W2`` by ``s`` scales
    the estimate by exactly ``s``. Parameters already under target come back
    unchanged.
    """
    if not target > 0:
        raise ValueError("target must be positive")
    est = residual_lipschitz(p, probes, iters, side, seed)
    if est <= target:
        return p
    w1, b1, w2, b2 = p.unpack()
    return p.with_theta(_pack(w1, b1, w2 * (target / est), b2))


# --- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"SCIPARM\x00"
CKPT_VERSION = 1


def save_checkpoint(path, p: DenoiserParams, **header) -> Path:
    """JSON header (shape metadata plus ``header`` fields) then float32 theta."""
    path = Path(path)
    head = dict(p.meta(), format="scideq-params", version=CKPT_VERSION, **header)
    blob = json.dumps(head, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.asarray(p.theta, dtype="<f4").tobytes())
    return path


def load_checkpoint(path):
    """Return ``(params, header)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    head = json.loads(raw[12:12 + hlen].decode())
    if head.get("version") != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {head.get('version')}")
    theta = np.frombuffer(raw[12 + hlen:], dtype="<f4").astype(float)
    if theta.size != head["n_params"]:
        raise ValueError(f"{path}: payload has {theta.size} values, header says {head['n_params']}")
    p = DenoiserParams(theta, head["channels"], head["kernel"], head["variant"],
                       head["activation"], head["layers"])
    return p, head
