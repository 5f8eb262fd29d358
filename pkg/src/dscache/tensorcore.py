"""Small deterministic dense kernels.

Matrices are plain 2-D numpy arrays. ``matmul`` runs a fixed-order triple loop
so that results are reproducible bit-for-bit and do not depend on the BLAS
build; everything else leans on numpy row reductions, which are deterministic
for a fixed array layout.
"""

from __future__ import annotations

import zlib
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ConfigurationError

DEFAULT_DTYPE = np.float64
RMS_EPS = 1e-6


@njit(cache=True, nogil=True)
def _matmul_kernel(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            s = out[i, j]
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def dtype_for(precision: str):
    if precision == "f64":
        return np.float64
    if precision == "f32":
        return np.float32
    raise ConfigurationError(f"unknown precision {precision!r} (expected f32 or f64)")


class Meter:
    """Per-run cost counters: multiply-accumulates by phase and the largest
    RoPE position handed out. Never shared between runs."""

    def __init__(self):
        self.macs = defaultdict(int)
        self.max_position = -1
        self._phase = "other"

    @contextmanager
    def phase(self, name: str):
        prev, self._phase = self._phase, name
        try:
            yield self
        finally:
            self._phase = prev

    def add_macs(self, n: int) -> None:
        self.macs[self._phase] += int(n)

    def saw_position(self, pos: int) -> None:
        if pos > self.max_position:
            self.max_position = int(pos)

    def total(self, phase: str | None = None) -> int:
        if phase is None:
            return sum(self.macs.values())
        return self.macs.get(phase, 0)


def matmul(a: np.ndarray, b: np.ndarray, meter: Meter | None = None) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    a = np.ascontiguousarray(a, dtype=dtype)
    b = np.ascontiguousarray(b, dtype=dtype)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    if meter is not None:
        meter.add_macs(a.shape[0] * a.shape[1] * b.shape[1])
    if out.size == 0 or a.shape[1] == 0:
        return out
    return _matmul_kernel(a, b, out)


def softmax_rows(scores: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Row softmax where row ``r`` only sees columns ``[0, valid[r])``.

    ``valid`` is the causal-mask descriptor: one prefix length per row.
    Masked columns come back as exact zeros.
    """
    valid = np.asarray(valid)
    if valid.shape != (scores.shape[0],):
        raise ConfigurationError("mask descriptor must give one prefix length per row")
    if np.any(valid < 1) or np.any(valid > scores.shape[1]):
        raise RuntimeError("softmax row with no valid columns")
    cols = np.arange(scores.shape[1])
    mask = cols[None, :] < valid[:, None]
    masked = np.where(mask, scores, -np.inf)
    shifted = masked - masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0).astype(scores.dtype, copy=False)
    return e / e.sum(axis=1, keepdims=True)


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    if gain.shape != (x.shape[1],):
        raise ConfigurationError(f"gain length {gain.shape} != cols {x.shape[1]}")
    ms = np.mean(x * x, axis=1, keepdims=True)
    return x / np.sqrt(ms + RMS_EPS) * gain


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("rng labels must be non-negative")
        return int(label)
    return zlib.crc32(str(label).encode())


@dataclass(frozen=True)
class Rng:
    """Splittable counter-based generator (Philox keyed by seed + path).

    An ``Rng`` is a value: drawing from it twice gives the same numbers.
    Use :meth:`split` to derive independent streams.
    """

    seed: int
    path: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")

    def split(self, *labels) -> "Rng":
        return Rng(self.seed, self.path + tuple(_label_to_int(x) for x in labels))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))


def seeded_gaussian(rng: Rng, rows: int, cols: int, scale: float = 1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
    if scale <= 0:
        raise ConfigurationError("scale must be positive")
    g = rng.generator().standard_normal((rows, cols)) * scale
    return g.astype(dtype, copy=False)
