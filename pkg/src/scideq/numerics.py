"""Small dense linear algebra used for oracles and the Anderson sub-problem.

Everything here works on plain 2-D numpy arrays and is meant for matrices of
at most a few thousand rows. None of it tries to compete with LAPACK.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import DimMismatch, NotSymmetric, SingularMatrix

PIVOT_TOL = 1e-12
JACOBI_OFFDIAG_TOL = 1e-12
# Jacobi sweeps cost O(dim^3) python-level rotations; past this size we hand
# the symmetric problem to LAPACK.
JACOBI_MAX_DIM = 256
DENSE_LIMIT = 4096


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimMismatch(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def dense_solve(a, b) -> np.ndarray:
    """Solve ``a @ x = b`` by Gaussian elimination with partial pivoting.

    Rows are equilibrated by their largest magnitude before elimination, and
    a pivot below ``PIVOT_TOL`` in the scaled system raises
    :class:`SingularMatrix`. ``b`` may be a vector or a matrix of right-hand
    sides.
    """
    a = _as_matrix(a)
    b = np.asarray(b, dtype=float)
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimMismatch(f"matrix must be square, got {a.shape}")
    if b.shape[0] != n:
        raise DimMismatch(f"rhs has {b.shape[0]} rows, matrix has {n}")
    vector_rhs = b.ndim == 1
    rhs = b.reshape(n, -1).copy()
    m = a.copy()

    scale = np.max(np.abs(m), axis=1)
    if np.any(scale == 0.0):
        raise SingularMatrix("matrix has an all-zero row")
    m /= scale[:, None]
    rhs /= scale[:, None]

    for k in range(n):
        piv = k + int(np.argmax(np.abs(m[k:, k])))
        if abs(m[piv, k]) < PIVOT_TOL:
            raise SingularMatrix(f"pivot {abs(m[piv, k]):.3e} in column {k}")
        if piv != k:
            m[[k, piv]] = m[[piv, k]]
            rhs[[k, piv]] = rhs[[piv, k]]
        factors = m[k + 1:, k] / m[k, k]
        m[k + 1:, k:] -= np.outer(factors, m[k, k:])
        rhs[k + 1:] -= np.outer(factors, rhs[k])

    x = np.empty_like(rhs)
    for k in range(n - 1, -1, -1):
        x[k] = (rhs[k] - m[k, k + 1:] @ x[k + 1:]) / m[k, k]
    return x[:, 0] if vector_rhs else x


def solve_alpha(residuals) -> np.ndarray:
    """Weights minimising ``||A alpha||^2`` subject to ``sum(alpha) == 1``.

    ``residuals`` holds one residual per column. The KKT system
    ``[[2 A^T A + r I, 1], [1^T, 0]]`` is solved with a ridge
    ``r = 1e-10 * trace(A^T A) / s``. The Gram matrix is normalised by its
    mean diagonal first; the minimiser is invariant to that scaling and it
    keeps pivots comparable when residuals are tiny.
    """
    a = _as_matrix(residuals)
    s = a.shape[1]
    if s < 1:
        raise DimMismatch("need at least one residual column")
    if s == 1:
        return np.ones(1)
    gram = a.T @ a
    mean_diag = np.trace(gram) / s
    if mean_diag == 0.0:
        return np.full(s, 1.0 / s)
    gram = gram / mean_diag
    ridge = 1e-10 * np.trace(gram) / s
    kkt = np.zeros((s + 1, s + 1))
    kkt[:s, :s] = 2.0 * gram + ridge * np.eye(s)
    kkt[:s, s] = 1.0
    kkt[s, :s] = 1.0
    rhs = np.zeros(s + 1)
    rhs[s] = 1.0
    sol = dense_solve(kkt, rhs)
    alpha = sol[:s]
    # Elimination leaves the constraint satisfied only to rounding; renormalise.
    return alpha / alpha.sum()


def power_iteration(
    apply: Callable[[np.ndarray], np.ndarray],
    dim: int,
    iters: int,
    seed: int = 0,
    apply_t: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> float:
    """Estimate the largest singular value of a linear map.

    Iterates on ``v -> J^T (J v)`` from a seeded Gaussian start. ``apply_t``
    is the transpose map; when omitted ``apply`` is assumed symmetric. The
    returned value is the square root of the best Rayleigh quotient seen.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    transpose = apply if apply_t is None else apply_t
    best = 0.0
    for _ in range(iters):
        w = np.asarray(transpose(np.asarray(apply(v), dtype=float)), dtype=float).reshape(-1)
        rq = float(v @ w)
        best = max(best, rq)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        v = w / norm
    return float(np.sqrt(max(best, 0.0)))


def _jacobi_eigvals(a: np.ndarray, max_sweeps: int = 100) -> np.ndarray:
    a = a.copy()
    n = a.shape[0]
    fro = max(1.0, float(np.linalg.norm(a)))
    for _ in range(max_sweeps):
        off = np.sqrt(max(float(np.sum(a * a) - np.sum(np.diag(a) ** 2)), 0.0))
        if off <= JACOBI_OFFDIAG_TOL * fro:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta  # theta^2 would overflow
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
    return np.sort(np.diag(a))


def sym_eigvals(a) -> np.ndarray:
    """All eigenvalues of a symmetric matrix in ascending order.

    Uses cyclic Jacobi rotations up to ``JACOBI_MAX_DIM`` and LAPACK's
    ``eigvalsh`` beyond that.
    """
    a = _as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise DimMismatch(f"matrix must be square, got {a.shape}")
    if a.shape[0] > DENSE_LIMIT:
        raise DimMismatch(f"dense eigen problems are limited to {DENSE_LIMIT} rows")
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > 1e-10 * max(1.0, float(np.max(np.abs(a)))):
        raise NotSymmetric(f"asymmetry {asym:.3e} exceeds tolerance")
    a = 0.5 * (a + a.T)
    if a.shape[0] > JACOBI_MAX_DIM:
        return np.linalg.eigvalsh(a)
    return _jacobi_eigvals(a)
