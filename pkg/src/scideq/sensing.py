"""Snapshot compressive imaging forward model.

A video cube is stored frame-major as an array of shape ``(B, n)``: ``B``
frames of ``n`` pixels each. A measurement is a length-``n`` vector. The
sensing operator is ``Phi = [diag(m_1), ..., diag(m_B)]`` and is never formed
explicitly, except by :func:`dense_phi` for oracle checks.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateMask, DimMismatch

GENERATOR_VERSION = "blob-2"
BLOB_WIDTH = (0.08, 0.16)  # Gaussian sigma as a fraction of the frame side
COVERAGE_TOL = 1e-14


@dataclass(frozen=True, eq=False)
class MaskSet:
    """Per-frame masks, ``masks[b]`` being the length-``n`` mask of frame ``b``."""

    masks: np.ndarray

    def __post_init__(self):
        m = np.array(self.masks, dtype=float)
        if m.ndim != 2:
            raise DimMismatch(f"masks must have shape (B, n), got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("masks contain non-finite values")
        m.setflags(write=False)
        object.__setattr__(self, "masks", m)
        d = np.sum(m * m, axis=0)
        if np.any(d <= COVERAGE_TOL):
            bad = int(np.flatnonzero(d <= COVERAGE_TOL)[0])
            raise DegenerateMask(f"pixel {bad} is not covered by any mask")

    @property
    def B(self) -> int:
        return self.masks.shape[0]

    @property
    def n(self) -> int:
        return self.masks.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape


def _check_cube(m: MaskSet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != m.shape:
        raise DimMismatch(f"cube shape {x.shape} does not match masks {m.shape}")
    return x


def _check_meas(m: MaskSet, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (m.n,):
        raise DimMismatch(f"measurement shape {y.shape}, expected ({m.n},)")
    return y


def phi_apply(m: MaskSet, x: np.ndarray) -> np.ndarray:
    """``y[i] = sum_b masks[b, i] * x[b, i]``."""
    x = _check_cube(m, x)
    return np.einsum("bi,bi->i", m.masks, x)


def phi_adjoint(m: MaskSet, y: np.ndarray) -> np.ndarray:
    y = _check_meas(m, y)
    return m.masks * y[None, :]


def gram_diagonal(m: MaskSet) -> np.ndarray:
    """Diagonal of ``Phi Phi^T``, which is diagonal for this operator."""
    d = np.sum(m.masks * m.masks, axis=0)
    if np.any(d <= COVERAGE_TOL):
        raise DegenerateMask("uncovered pixel in mask set")
    return d


def measurement_correction(m: MaskSet, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``Phi^T (Phi Phi^T)^{-1} (y - Phi x)``, the step onto the manifold."""
    return phi_adjoint(m, (_check_meas(m, y) - phi_apply(m, x)) / gram_diagonal(m))


def project_onto_manifold(m: MaskSet, v: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{x : Phi x = y}``."""
    v = _check_cube(m, v)
    return v + measurement_correction(m, v, y)


def psi_apply(m: MaskSet, x: np.ndarray) -> np.ndarray:
    """Apply ``Psi = Phi^T (Phi Phi^T)^{-1} Phi``, the projector onto range(Phi^T)."""
    return phi_adjoint(m, phi_apply(m, x) / gram_diagonal(m))


def dense_phi(m: MaskSet) -> np.ndarray:
    """Explicit ``n x nB`` matrix in frame-major column order (oracle scale only)."""
    n, B = m.n, m.B
    phi = np.zeros((n, n * B))
    for b in range(B):
        phi[np.arange(n), b * n + np.arange(n)] = m.masks[b]
    return phi


def frame_side(n: int) -> int | None:
    side = math.isqrt(n)
    return side if side * side == n else None


def _blob_video(n: int, B: int, rng: np.random.Generator) -> np.ndarray:
    side = frame_side(n)
    h, w = (1, n) if side is None else (side, side)
    size = max(h, w)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    amp = rng.uniform(0.6, 1.0)
    width = size * rng.uniform(BLOB_WIDTH[0], BLOB_WIDTH[1])
    start = rng.uniform([0.25 * h, 0.25 * w], [0.75 * h, 0.75 * w])
    vel = rng.uniform(-1.0, 1.0, size=2) * 0.5 * size / max(B, 1)
    if h == 1:
        start[0], vel[0] = 0.0, 0.0
    video = np.empty((B, h, w))
    for b in range(B):
        cy, cx = start + b * vel
        video[b] = amp * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * width ** 2))
    return np.clip(video, 0.0, 1.0).reshape(B, n)


def generate_instance(n: int, B: int, seed: int, noise_sigma: float = 0.0):
    """Synthetic ``(masks, truth, y)`` triple.

    Masks are Bernoulli(0.5); any pixel left uncovered gets its column
    redrawn. The truth is a moving-blob video in ``[0, 1]`` and
    ``y = Phi x + e`` with ``e ~ N(0, noise_sigma^2)``.
    """
    if n < 1 or B < 1:
        raise ValueError("n and B must be positive")
    mask_rng, video_rng, noise_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
    )
    masks = (mask_rng.random((B, n)) < 0.5).astype(float)
    uncovered = ~masks.any(axis=0)
    while uncovered.any():
        idx = np.flatnonzero(uncovered)
        masks[:, idx] = (mask_rng.random((B, idx.size)) < 0.5).astype(float)
        uncovered = ~masks.any(axis=0)
    mask_set = MaskSet(masks)
    truth = _blob_video(n, B, video_rng)
    y = phi_apply(mask_set, truth)
    if noise_sigma > 0:
        y = y + noise_sigma * noise_rng.standard_normal(n)
    return mask_set, truth, y


# --- binary container -------------------------------------------------------

MAGIC = b"SCIDATA\x00"
FORMAT_VERSION = 1
KIND_CUBE, KIND_MASKS, KIND_MEASUREMENT = 0, 1, 2
_HEADER = struct.Struct("<8sIB3x")  # 16 bytes
_DIMS = struct.Struct("<II")


def write_array(path, data: np.ndarray, kind: int = KIND_CUBE, meta: dict | None = None) -> Path:
    """Write a ``(B, n)`` array (or length-``n`` vector) in the binary container.

    Values are stored as little-endian float32. When ``meta`` is given a
    ``<basename>.meta.json`` sidecar is written next to the file.
    """
    path = Path(path)
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    B, n = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, kind))
        fh.write(_DIMS.pack(n, B))
        fh.write(arr.astype("<f4").tobytes())
    if meta is not None:
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_array(path):
    """Return ``(array, kind)``; measurements come back as 1-D vectors."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + _DIMS.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, kind = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    n, B = _DIMS.unpack_from(raw, _HEADER.size)
    payload = raw[_HEADER.size + _DIMS.size:]
    if len(payload) != 4 * n * B:
        raise ValueError(f"{path}: expected {n * B} values, found {len(payload) // 4}")
    arr = np.frombuffer(payload, dtype="<f4").astype(float).reshape(B, n)
    if kind == KIND_MEASUREMENT:
        arr = arr[0]
    return arr, kind


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_instance(directory, masks: MaskSet, truth, y, meta: dict) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "masks": write_array(directory / "masks.bin", masks.masks, KIND_MASKS, meta),
        "truth": write_array(directory / "truth.bin", truth, KIND_CUBE, meta),
        "measurement": write_array(directory / "measurement.bin", y, KIND_MEASUREMENT, meta),
    }
    return {k: str(v) for k, v in paths.items()}


def load_instance(directory):
    """Load ``(masks, truth or None, y)`` written by :func:`save_instance`."""
    directory = Path(directory)
    masks, kind = read_array(directory / "masks.bin")
    if kind != KIND_MASKS:
        raise ValueError("masks.bin does not hold a mask set")
    y, kind = read_array(directory / "measurement.bin")
    if kind != KIND_MEASUREMENT:
        raise ValueError("measurement.bin does not hold a measurement")
    truth = None
    if (directory / "truth.bin").exists():
        truth, _ = read_array(directory / "truth.bin")
    return MaskSet(masks), truth, y
