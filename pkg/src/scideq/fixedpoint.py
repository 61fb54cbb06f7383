"""Fixed-point engines: plain iteration and Anderson acceleration.

Both engines evaluate ``f(x_k)`` once per iteration, record the raw residual
``||f(x_k) - x_k||`` and stop as soon as its value divided by ``sqrt(x.size)``
falls below ``tol``. On convergence the returned point is the certified
``x_k`` itself, not ``f(x_k)``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import Diverged
from .numerics import solve_alpha
from .trace import FixedPointTrace

DIVERGENCE_LIMIT = 1e12

Monitor = Callable[[np.ndarray], tuple]


@dataclass(frozen=True)
class AndersonConfig:
    s: int = 3
    delta: float = 1.0
    max_iters: int = 100
    tol: float = 1e-6

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("history depth s must be >= 1")
        if self.max_iters < self.s:
            raise ValueError("max_iters must be >= s")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if not self.tol >= 0:
            raise ValueError("tol must be >= 0")


def anderson_step(xs: Sequence[np.ndarray], fxs: Sequence[np.ndarray], delta: float = 1.0) -> np.ndarray:
    """Combine stored pairs, newest first, into the next Anderson iterate.

    ``(1 - delta) sum_i alpha_i x_i + delta sum_i alpha_i f(x_i)`` where
    ``alpha`` minimises the combined residual under ``sum(alpha) == 1``.
    """
    if len(xs) != len(fxs) or not xs:
        raise ValueError("need matching, nonempty iterate and value histories")
    shape = np.shape(xs[0])
    X = np.stack([np.ravel(x) for x in xs], axis=1)
    F = np.stack([np.ravel(fx) for fx in fxs], axis=1)
    alpha = solve_alpha(F - X)
    nxt = F @ alpha
    if delta != 1.0:
        nxt = (1.0 - delta) * (X @ alpha) + delta * nxt
    return nxt.reshape(shape)


def _record(trace, k, res, x, monitor):
    if monitor is None:
        trace.add(k, res)
    else:
        fid, obj = monitor(x)
        trace.add(k, res, fid, obj)
    if not np.isfinite(res) or res > DIVERGENCE_LIMIT:
        raise Diverged(f"fixed-point residual {res:.3e} at iteration {k}", trace)


def iterate_plain(
    f: Callable[[np.ndarray], np.ndarray],
    x0,
    max_iters: int,
    tol: float,
    monitor: Optional[Monitor] = None,
):
    x = np.array(x0, dtype=float)
    scale = np.sqrt(x.size)
    trace = FixedPointTrace()
    for k in range(1, max_iters + 1):
        fx = np.asarray(f(x), dtype=float)
        res = float(np.linalg.norm(fx - x))
        _record(trace, k, res, x, monitor)
        if res / scale < tol:
            trace.converged = True
            return x, trace
        x = fx
    return x, trace


def solve_anderson(
    f: Callable[[np.ndarray], np.ndarray],
    x0,
    cfg: AndersonConfig,
    monitor: Optional[Monitor] = None,
):
    """Anderson-accelerated fixed-point solve with a rolling history of ``cfg.s`` pairs."""
    x = np.array(x0, dtype=float)
    scale = np.sqrt(x.size)
    trace = FixedPointTrace()
    xs: deque = deque(maxlen=cfg.s)
    fxs: deque = deque(maxlen=cfg.s)
    for k in range(1, cfg.max_iters + 1):
        fx = np.asarray(f(x), dtype=float)
        res = float(np.linalg.norm(fx - x))
        _record(trace, k, res, x, monitor)
        if res / scale < cfg.tol:
            trace.converged = True
            return x, trace
        xs.appendleft(x)
        fxs.appendleft(fx)
        x = anderson_step(xs, fxs, cfg.delta)
    return x, trace


def affine_contraction(dim: int, radius: float = 0.9, seed: int = 0):
    """Test map ``x -> A x + b`` with symmetric ``A`` of spectral radius ``radius``.

    Eigenvalues are spread uniformly in ``[-radius, radius]`` with ``radius``
    itself always present. Returns ``(f, x_star)``.
    """
    rng = np.random.default_rng([seed, dim])
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    lam = rng.uniform(-radius, radius, dim)
    lam[0] = radius
    a = (q * lam) @ q.T
    b = rng.standard_normal(dim)
    x_star = np.linalg.solve(np.eye(dim) - a, b)
    return (lambda x: a @ x + b), x_star
