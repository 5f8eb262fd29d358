"""Diagnostics: value-cache similarity, attention mass by region, cost counters."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .kvstore import KVCache


@dataclass
class RunMetrics:
    step: int
    cache_rows: list[int] = field(default_factory=list)
    stored_rows: int = 0
    memory_bytes: int = 0
    max_position_used: int = 0
    prefill_macs: int = 0
    decode_macs: int = 0
    value_cosine_vs_reference: float | None = None
    attention_mass_sink: float | None = None
    attention_mass_past: float | None = None
    attention_mass_recent: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def value_cache_cosine(subject: KVCache, reference: KVCache, return_skipped: bool = False):
    """Row-wise cosine of value vectors, averaged over rows, then over layers.

    Rows where either side has zero norm are skipped (and counted).
    """
    if subject.num_layers != reference.num_layers:
        raise ContractViolation("caches have different layer counts")
    if subject.uniform_len != reference.uniform_len or subject.hidden != reference.hidden:
        raise ContractViolation(
            f"cannot compare {subject.uniform_len}x{subject.hidden} with "
            f"{reference.uniform_len}x{reference.hidden} value caches")
    per_layer = []
    skipped = 0
    for a, b in zip(subject.layers, reference.layers):
        va = np.asarray(a.values, dtype=np.float64)
        vb = np.asarray(b.values, dtype=np.float64)
        na = np.linalg.norm(va, axis=1)
        nb = np.linalg.norm(vb, axis=1)
        ok = (na > 0) & (nb > 0)
        skipped += int((~ok).sum())
        if ok.any():
            cos = np.sum(va[ok] * vb[ok], axis=1) / (na[ok] * nb[ok])
            per_layer.append(float(np.mean(np.clip(cos, -1.0, 1.0))))
    value = float(np.mean(per_layer)) if per_layer else float("nan")
    return (value, skipped) if return_skipped else value


def attention_mass(split: tuple[int, int], rows: Sequence[np.ndarray]) -> tuple[float, float, float]:
    """Average attention split into (sink, past, recent) fractions.

    ``split`` is ``(sink_end, recent_start)`` in key-index space; keys at or
    after ``recent_start`` count as recent. ``rows`` are attention matrices
    (queries x keys); every query row contributes equally.
    """
    sink_end, recent_start = split
    if not 0 <= sink_end <= recent_start:
        raise ContractViolation("need 0 <= sink_end <= recent_start")
    totals = np.zeros(3)
    count = 0
    for a in rows:
        a = np.asarray(a, dtype=np.float64)
        if a.size == 0:
            continue
        totals += [a[:, :sink_end].sum(), a[:, sink_end:recent_start].sum(), a[:, recent_start:].sum()]
        count += a.shape[0]
    if count == 0:
        return 0.0, 0.0, 0.0
    fractions = totals / totals.sum()
    return float(fractions[0]), float(fractions[1]), float(fractions[2])


def cost_counters(metrics: Sequence[RunMetrics], peak_rows: int = 0, max_position: int | None = None):
    """Aggregate a run's per-query records: (prefill_macs, decode_macs, peak_cache_rows, max_position)."""
    prefill = sum(m.prefill_macs for m in metrics)
    decode = sum(m.decode_macs for m in metrics)
    peak = max([peak_rows] + [sum(m.cache_rows[:1]) for m in metrics])
    maxpos = max([max_position or 0] + [m.max_position_used for m in metrics])
    return prefill, decode, peak, maxpos
