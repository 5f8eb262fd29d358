"""Rotary position embedding with adjacent-pair rotation.

Dimension pair ``(2i, 2i+1)`` of every head is rotated by
``position * base ** (-2i / head_dim)``. Inner products of rotated vectors
then depend on the two positions only through their difference, which is
what lets stored keys be re-based after eviction.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError, ContractViolation, PositionOverflowError


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = 10000.0
    max_position: int = 2048

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigurationError(f"head_dim must be a positive even number, got {self.head_dim}")
        if not self.base > 1:
            raise ConfigurationError("rope base must be > 1")
        if self.max_position < 0:
            raise ConfigurationError("max_position must be non-negative")

    @property
    def inv_freq(self) -> np.ndarray:
        return self.base ** (-np.arange(0, self.head_dim, 2, dtype=np.float64) / self.head_dim)


@lru_cache(maxsize=16)
def _tables(params: RopeParams, dtype) -> tuple[np.ndarray, np.ndarray]:
    # one row per position 0..max_position; entries match computing the angle directly
    angles = np.arange(params.max_position + 1, dtype=np.int64)[:, None].astype(np.float64) * params.inv_freq[None, :]
    cos, sin = np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)
    cos.flags.writeable = sin.flags.writeable = False
    return cos, sin


def _check_positions(positions: np.ndarray, params: RopeParams, meter=None) -> None:
    if positions.size == 0:
        return
    lo, hi = int(positions.min()), int(positions.max())
    if lo < 0:
        raise ContractViolation(f"negative rope position {lo}")
    if hi > params.max_position:
        raise PositionOverflowError(f"position {hi} exceeds max_position {params.max_position}")
    if meter is not None:
        meter.saw_position(hi)


def rope_rotate(x: np.ndarray, positions, params: RopeParams, meter=None) -> np.ndarray:
    """Rotate each row of ``x`` at its own position.

    ``x`` has shape ``(n, heads * head_dim)``; every head chunk is rotated
    with the same angles. This is the primitive the other helpers use.
    """
    positions = np.asarray(positions, dtype=np.int64)
    n, cols = x.shape
    if positions.shape != (n,):
        raise ContractViolation(f"need {n} positions, got shape {positions.shape}")
    if cols % params.head_dim:
        raise ConfigurationError(f"width {cols} is not a multiple of head_dim {params.head_dim}")
    _check_positions(positions, params, meter)
    if n == 0:
        return x.copy()
    cos_t, sin_t = _tables(params, np.dtype(x.dtype))
    cos = cos_t[positions][:, None, :]
    sin = sin_t[positions][:, None, :]
    pairs = x.reshape(n, cols // params.head_dim, params.head_dim // 2, 2)
    even, odd = pairs[..., 0], pairs[..., 1]
    out = np.empty_like(pairs)
    out[..., 0] = even * cos - odd * sin
    out[..., 1] = even * sin + odd * cos
    return out.reshape(n, cols)


def rope_apply(x: np.ndarray, position: int, params: RopeParams) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != (params.head_dim,):
        raise ContractViolation(f"expected a vector of length {params.head_dim}")
    return rope_rotate(x[None, :], [position], params)[0]


def rope_apply_block(m: np.ndarray, start_position: int, params: RopeParams, meter=None) -> np.ndarray:
    positions = start_position + np.arange(m.shape[0], dtype=np.int64)
    return rope_rotate(m, positions, params, meter)


def relative_score(q: np.ndarray, k: np.ndarray, i: int, j: int, params: RopeParams) -> float:
    """<rope(q, i), rope(k, j)>; a function of ``i - j`` only."""
    if i < j:
        raise ContractViolation("relative_score expects i >= j")
    return float(np.dot(rope_apply(q, i, params), rope_apply(k, j, params)))
