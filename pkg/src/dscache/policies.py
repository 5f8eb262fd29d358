"""Streaming cache-construction policies.

All policies consume the same event stream (frames, queries) and differ in
how KV entries for incoming frames are built and which cache answers a query:

* ``uniform``  - each frame is encoded against sink + rolling window and
  appended; FIFO eviction keeps ``l_W`` frames.
* ``offline``  - keeps raw features of the last ``l_W`` frames only and
  recomputes everything from scratch at query time.
* ``dscache``  - frames wait in a raw feature buffer of ``l_I`` frames; only
  frames leaving the buffer extend the cumulative cache (``l_U`` frames).
  Queries build an instant cache from sink + buffer alone and answer from
  ``[sink, cumulative, instant]``.
* ``approx``   - dscache, but the buffer's cache is kept incrementally and
  rebuilt from scratch every ``refresh_period`` frames.

Every attention computation assigns consecutive positions from zero over the
active cache, so positions stay bounded however long the stream runs.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import ConfigurationError
from .kvstore import (
    AGNOSTIC,
    ENCODED,
    TEXT,
    ExplicitPositions,
    KVCache,
    PositionAssignment,
    SinkCache,
    concat,
    evict_blocks,
    slice_cache,
    strip_text,
    subsample_recent,
    subsample_stride,
)
from .metrics import RunMetrics, attention_mass, value_cache_cosine
from .model import DecodeResult, Model, TokenBlock, Trace
from .tensorcore import Meter, Rng, seeded_gaussian

PolicyKind = Literal["uniform", "offline", "dscache", "approx"]


@dataclass(frozen=True)
class PolicyConfig:
    """Budgets for one policy. Frame counts unless noted; ``l_A`` is in tokens.

    ``l_W == l_I + l_U`` always. The uniform baseline is the ``l_I = 0``
    corner and the offline sliding window the ``l_U = 0`` corner.
    """

    kind: PolicyKind = "dscache"
    l_A: int = 8
    l_W: int = 32
    l_I: int = 4
    l_U: int = 28
    l_L: int | None = None
    tokens_per_frame: int = 8
    refresh_period: int = 0
    resolution_multiplier: float = 1.0
    strip_text_on_evict: bool = True
    buffer_text_policy: Literal["exclude", "include_responses"] = "exclude"
    # frame stride applied to the cumulative cache at decode time (1 = identity)
    decode_stride: int = 1
    # uniform only: key storage and position layout
    storage: Literal["agnostic", "encoded"] = "agnostic"
    positions: Literal["rebased", "absolute", "shuffled"] = "rebased"
    # frames counted as "recent" for attention-mass splits; None = policy default
    recent_frames: int | None = None
    attention_capture_every: int = 1

    def __post_init__(self):
        if self.l_L is None:
            object.__setattr__(self, "l_L", self.l_U)
        for name in ("l_A", "l_W", "l_I", "l_U", "l_L", "refresh_period"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.tokens_per_frame < 1:
            raise ConfigurationError("tokens_per_frame must be >= 1")
        if self.l_W != self.l_I + self.l_U:
            raise ConfigurationError(f"l_W ({self.l_W}) must equal l_I + l_U ({self.l_I} + {self.l_U})")
        if self.l_L > self.l_U:
            raise ConfigurationError(f"l_L ({self.l_L}) must not exceed l_U ({self.l_U})")
        if self.resolution_multiplier < 1:
            raise ConfigurationError("resolution_multiplier must be >= 1")
        if self.decode_stride < 1 or self.attention_capture_every < 1:
            raise ConfigurationError("decode_stride and attention_capture_every must be >= 1")
        if self.kind == "uniform" and self.l_I != 0:
            raise ConfigurationError("uniform policy has no feature buffer (l_I must be 0)")
        if self.kind == "offline" and self.l_U != 0:
            raise ConfigurationError("offline policy keeps no cumulative cache (l_U must be 0)")
        if self.kind == "approx" and self.refresh_period < 1:
            raise ConfigurationError("approx policy needs refresh_period >= 1")
        if self.kind in ("dscache", "offline") and self.refresh_period:
            raise ConfigurationError("refresh_period only applies to the approx policy")
        if self.kind != "uniform" and (self.storage != "agnostic" or self.positions != "rebased"):
            raise ConfigurationError("storage/positions overrides only apply to the uniform policy")
        if self.storage == "encoded" and self.positions != "rebased":
            raise ConfigurationError("encoded storage always uses absolute positions")
        if self.buffer_text_policy not in ("exclude", "include_responses"):
            raise ConfigurationError(f"unknown buffer_text_policy {self.buffer_text_policy!r}")

    @classmethod
    def uniform(cls, l_W: int = 32, **kw) -> "PolicyConfig":
        return cls(kind="uniform", l_W=l_W, l_I=0, l_U=l_W, **kw)

    @classmethod
    def offline(cls, l_W: int = 32, **kw) -> "PolicyConfig":
        return cls(kind="offline", l_W=l_W, l_I=l_W, l_U=0, **kw)

    @classmethod
    def dscache(cls, l_I: int = 4, l_U: int = 28, **kw) -> "PolicyConfig":
        return cls(kind="dscache", l_W=l_I + l_U, l_I=l_I, l_U=l_U, **kw)

    @classmethod
    def approx(cls, l_I: int = 8, l_U: int = 24, refresh_period: int = 8, **kw) -> "PolicyConfig":
        return cls(kind="approx", l_W=l_I + l_U, l_I=l_I, l_U=l_U, refresh_period=refresh_period, **kw)

    @property
    def mass_recent_frames(self) -> int:
        if self.recent_frames is not None:
            return self.recent_frames
        if self.kind == "uniform":
            return min(4, self.l_W)
        return self.l_I

    def position_bound(self, query_tokens: int = 0, max_new: int = 0) -> int:
        """Largest RoPE position any computation can reach with these budgets
        (visual frames; re-based layouts only)."""
        tpf = self.tokens_per_frame
        instant = 0
        if self.l_I:
            instant = (self.l_I - 1) * tpf + math.ceil(self.resolution_multiplier * tpf)
        at_query = self.l_A + self.l_U * tpf + instant + query_tokens + max(0, max_new - 1)
        at_ingest = self.l_A + self.l_L * tpf + tpf
        return max(at_query, at_ingest, self.l_A + instant) - 1


@dataclass(frozen=True)
class StreamEvent:
    kind: Literal["frame", "query"]
    block: TokenBlock
    max_new: int = 0
    step: int = 0

    @classmethod
    def frame(cls, block: TokenBlock, step: int = 0) -> "StreamEvent":
        return cls("frame", block, 0, step)

    @classmethod
    def query(cls, block: TokenBlock, max_new: int, step: int = 0) -> "StreamEvent":
        return cls("query", block, max_new, step)


@dataclass
class QueryOutput:
    step: int
    tokens: list[int]
    hidden: np.ndarray
    metrics: RunMetrics
    final_cache: KVCache = field(repr=False)
    boundaries: tuple[int, int] = (0, 0)  # (sink_end, recent_start) in the final cache


class FeatureBuffer:
    """FIFO of raw token blocks with a fixed capacity (in blocks)."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.blocks: deque[TokenBlock] = deque()

    def push(self, block: TokenBlock) -> TokenBlock | None:
        if self.capacity == 0:
            return block
        self.blocks.append(block)
        if len(self.blocks) > self.capacity:
            return self.blocks.popleft()
        return None

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def n_tokens(self) -> int:
        return sum(len(b) for b in self.blocks)

    @property
    def nbytes(self) -> int:
        return sum(b.embeddings.nbytes for b in self.blocks)


def boost_resolution(block: TokenBlock, multiplier: float, seed: int = 0) -> TokenBlock:
    """Deterministic stand-in for re-encoding a frame at higher resolution:
    tokens are repeated up to ``ceil(multiplier * n)`` and lightly perturbed
    with noise seeded by the block id. The input block is not modified."""
    n = len(block)
    m = math.ceil(multiplier * n)
    if m == n:
        return block
    idx = (np.arange(m) * n) // m
    noise = seeded_gaussian(Rng(seed).split("resolution", block.block_id), m, block.embeddings.shape[1],
                            0.05, block.embeddings.dtype)
    emb = block.embeddings[idx] + noise
    return TokenBlock(emb, block.tags[idx], block.block_id, block.frame_index)


class _Sink:
    """Collects the first ``l_A`` stream tokens and freezes their KV entries."""

    def __init__(self, model: Model, l_A: int, mode: str):
        self.model = model
        self.l_A = l_A
        self.mode = mode
        self._pending: list[TokenBlock] = []
        self._raw: list[TokenBlock] = []
        self._n = 0
        self.frozen: SinkCache | None = None if l_A else SinkCache(model.empty_cache(mode), np.zeros((0, model.hidden)))

    @property
    def filled(self) -> bool:
        return self.frozen is not None

    def absorb(self, block: TokenBlock, meter: Meter | None) -> TokenBlock | None:
        """Feed a frame; returns whatever part of it is not taken by the sink."""
        if self.filled:
            return block
        take = min(self.l_A - self._n, len(block))
        head = TokenBlock(block.embeddings[:take], block.tags[:take], block.block_id, block.frame_index)
        self._pending.append(head)
        self._n += take
        if self._n == self.l_A:
            cache = self.build(self._pending, meter)
            tokens = np.concatenate([b.embeddings for b in self._pending])
            self.frozen = SinkCache(cache, tokens)
            self._raw, self._pending = self._pending, []
        if take == len(block):
            return None
        return TokenBlock(block.embeddings[take:], block.tags[take:], block.block_id, block.frame_index)

    def build(self, blocks, meter: Meter | None) -> KVCache:
        empty = self.model.empty_cache(self.mode)
        if not blocks:
            return empty
        return self.model.encode_to_kv(blocks, empty, PositionAssignment(0, 0), meter)

    @property
    def raw_blocks(self) -> list[TokenBlock]:
        return list(self._raw if self.frozen is not None else self._pending)

    def cache(self) -> KVCache:
        """Sink KV entries; before the sink fills, whatever has arrived so far."""
        if self.frozen is not None:
            return self.frozen.cache
        return self.build(self._pending, None)

    @property
    def n_tokens(self) -> int:
        return self.l_A if self.filled else self._n


class StreamPolicy:
    """Shared driver: event dispatch, sink bootstrap, query metrics."""

    def __init__(self, model: Model, config: PolicyConfig, name: str | None = None):
        self.model = model
        self.config = config
        self.name = name or config.kind
        self.meter = Meter()
        self.sink = _Sink(model, config.l_A, self._storage_mode)
        self.step = 0
        self.n_frames = 0
        self.n_queries = 0
        self.newest_frame: TokenBlock | None = None
        self.peak_rows = 0
        self.outputs: list[QueryOutput] = []

    _storage_mode = AGNOSTIC

    # -- events -------------------------------------------------------------
    def feed(self, event: StreamEvent) -> QueryOutput | None:
        self.step = event.step
        if event.kind == "frame":
            self.ingest(event.block)
            return None
        out = self.answer(event.block, event.max_new)
        self.outputs.append(out)
        return out

    def run(self, events) -> list[QueryOutput]:
        return [o for o in (self.feed(e) for e in events) if o is not None]

    def ingest(self, block: TokenBlock) -> None:
        self.n_frames += 1
        if block.is_visual:
            self.newest_frame = block
        with self.meter.phase("ingest"):
            rest = self.sink.absorb(block, self.meter)
            if rest is not None:
                self._ingest(rest)
        self.peak_rows = max(self.peak_rows, self.stored_rows())

    def answer(self, query: TokenBlock, max_new: int) -> QueryOutput:
        qm = Meter()
        capture = self.n_queries % self.config.attention_capture_every == 0
        self.n_queries += 1
        trace = Trace() if capture else None
        result, final, bounds = self._answer(query, max_new, qm, trace)
        self._merge(qm)
        metrics = RunMetrics(
            step=self.step,
            cache_rows=[len(l) for l in final.layers],
            stored_rows=self.stored_rows(),
            memory_bytes=self.memory_bytes(),
            max_position_used=max(qm.max_position, 0),
            prefill_macs=qm.total("instant") + qm.total("prefill"),
            decode_macs=qm.total("decode"),
            value_cosine_vs_reference=self._newest_cosine(final),
        )
        if trace is not None:
            s, p, r = attention_mass(bounds, trace.attn_weights)
            metrics.attention_mass_sink, metrics.attention_mass_past, metrics.attention_mass_recent = s, p, r
        self.peak_rows = max(self.peak_rows, self.stored_rows())
        return QueryOutput(self.step, result.tokens, result.hidden, metrics, final, bounds)

    def _merge(self, qm: Meter) -> None:
        for k, v in qm.macs.items():
            self.meter.macs[k] += v
        self.meter.saw_position(qm.max_position)

    # -- hooks ----------------------------------------------------------------
    def _ingest(self, block: TokenBlock) -> None:
        raise NotImplementedError

    def _answer(self, query, max_new, meter, trace):
        raise NotImplementedError

    def stored_rows(self) -> int:
        raise NotImplementedError

    def memory_bytes(self) -> int:
        raise NotImplementedError

    # -- helpers --------------------------------------------------------------
    @property
    def frame_rows(self) -> int:
        return self.config.tokens_per_frame

    def _decode(self, final: KVCache, query, max_new, meter, trace, positions=None) -> DecodeResult:
        return self.model.decode_greedy(final, query, max_new, positions, meter, trace)

    def _zeta(self, cache: KVCache) -> KVCache:
        return subsample_recent(cache, self.config.l_L * self.frame_rows)

    def _zeta_decode(self, cache: KVCache) -> KVCache:
        return subsample_stride(cache, self.config.decode_stride, self.frame_rows)

    def _newest_cosine(self, final: KVCache) -> float | None:
        """Newest frame's value rows in ``final`` against encoding it with the
        sink alone (the single-frame reference)."""
        frame = self.newest_frame
        if frame is None or final.mode != AGNOSTIC:
            return None
        rows = np.flatnonzero((final.block_ids == frame.block_id) & (final.tags != TEXT))
        sink = self.sink.cache()
        if frame.block_id in set(sink.block_ids.tolist()):
            return None
        reference = self.model.encode_to_kv(frame, sink)
        if len(rows) != len(reference):
            return None
        return value_cache_cosine(final.map_rows(rows), reference)

    def reference_encoding(self, frame: TokenBlock) -> KVCache:
        return self.model.encode_to_kv(frame, self.sink.cache())


class UniformPolicy(StreamPolicy):
    """Rolling-window baseline: every frame is encoded against sink + window."""

    def __init__(self, model: Model, config: PolicyConfig, name: str | None = None, seed: int = 0):
        self._storage_mode = ENCODED if config.storage == "encoded" else AGNOSTIC
        super().__init__(model, config, name)
        self.window = model.empty_cache(self._storage_mode)
        # absolute stream position of every window row (for absolute/encoded layouts)
        self.window_pos = np.zeros(0, np.int64)
        self.next_position = 0
        self._shuffle_rng = Rng(seed).split("shuffle", self.name)

    def _layout(self, context_sink: KVCache, context_win: KVCache, win_pos, n_new: int, salt: int):
        ls, lw = len(context_sink), len(context_win)
        mode = self.config.positions
        if self.config.storage == "encoded":
            return PositionAssignment(self.next_position - ls - lw, self.next_position)
        if mode == "rebased":
            return PositionAssignment.contiguous(ls + lw)
        if mode == "absolute":
            keys = np.concatenate([np.arange(ls), win_pos])
            return ExplicitPositions(keys, self.next_position + np.arange(n_new))
        perm = self._shuffle_rng.split(salt).generator().permutation(ls + lw)
        return ExplicitPositions(perm.astype(np.int64), ls + lw + np.arange(n_new))

    def _ingest(self, block: TokenBlock) -> None:
        # tokens swallowed by the sink occupy the first absolute positions
        self.next_position = max(self.next_position, self.sink.n_tokens)
        win = self._zeta(self.window)
        win_pos = self.window_pos[len(self.window_pos) - len(win):]
        sink = self.sink.cache()
        positions = self._layout(sink, win, win_pos, len(block), self.n_frames)
        new = self.model.encode_to_kv(block, concat(sink, win), positions, self.meter)
        self._append(new, self.next_position + np.arange(len(new)))
        self.next_position += len(block)

    def _append(self, new: KVCache, pos: np.ndarray) -> None:
        self.window = concat(self.window, new)
        self.window_pos = np.concatenate([self.window_pos, pos])
        self.window = evict_blocks(self.window, self.config.l_W * self.frame_rows)
        self.window_pos = self.window_pos[len(self.window_pos) - len(self.window):]

    def _answer(self, query, max_new, meter, trace):
        sink = self.sink.cache()
        win = self._zeta_decode(self.window)
        if self.config.decode_stride > 1:
            keep = subsample_stride_index(len(self.window), self.config.decode_stride, self.frame_rows)
            win_pos = self.window_pos[keep]
        else:
            win_pos = self.window_pos
        final = concat(sink, win)
        positions = self._layout(sink, win, win_pos, len(query), 10**9 + self.n_queries)
        result = self._decode(final, query, max_new, meter, trace, positions)
        if not self.config.strip_text_on_evict:
            tail = slice_cache(result.cache, len(final), len(result.cache))
            self._append(tail, self.next_position + np.arange(len(tail)))
            self.next_position += len(tail)
        recent = min(len(win), self.config.mass_recent_frames * self.frame_rows)
        return result, final, (len(sink), len(final) - recent)

    def stored_rows(self) -> int:
        return len(self.sink.cache()) + len(self.window) if self.sink.filled else len(self.window)

    def memory_bytes(self) -> int:
        return self.window.nbytes + (self.sink.frozen.cache.nbytes if self.sink.filled else 0)


def subsample_stride_index(n: int, stride: int, group: int) -> np.ndarray:
    groups = np.arange(n) // group
    if n == 0:
        return np.zeros(0, np.int64)
    return np.flatnonzero((groups[-1] - groups) % stride == 0)


class OfflinePolicy(StreamPolicy):
    """Sliding-window recompute: raw features only, no persistent KV."""

    def __init__(self, model: Model, config: PolicyConfig, name: str | None = None):
        super().__init__(model, config, name)
        self.window: deque[TokenBlock] = deque(maxlen=config.l_W)

    def _ingest(self, block: TokenBlock) -> None:
        if self.config.l_W:
            self.window.append(block)

    def _answer(self, query, max_new, meter, trace):
        with meter.phase("instant"):
            sink = self.sink.build(self.sink.raw_blocks, meter)
            recent = self.model.encode_to_kv(list(self.window), sink, None, meter) if self.window \
                else self.model.empty_cache()
        final = concat(sink, recent)
        result = self._decode(final, query, max_new, meter, trace)
        return result, final, (len(sink), len(sink))

    def stored_rows(self) -> int:
        return 0

    def memory_bytes(self) -> int:
        raw = sum(b.embeddings.nbytes for b in self.window)
        return raw + (self.sink.frozen.tokens.nbytes if self.sink.filled else 0)


class DSCachePolicy(StreamPolicy):
    """Decoupled cumulative cache + on-demand instant cache."""

    def __init__(self, model: Model, config: PolicyConfig, name: str | None = None, seed: int = 0):
        super().__init__(model, config, name)
        self.buffer = FeatureBuffer(config.l_I)
        self.cumulative = model.empty_cache()
        self.seed = seed

    def _ingest(self, block: TokenBlock) -> None:
        self.buffer_push(block)

    def buffer_push(self, block: TokenBlock) -> TokenBlock | None:
        evicted = self.buffer.push(block)
        if evicted is not None:
            self.cumulative_update(evicted)
        return evicted

    def cumulative_update(self, evicted: TokenBlock) -> None:
        budget = self.config.l_U * self.frame_rows
        if budget == 0:
            return
        context = concat(self.sink.cache(), self._zeta(self.cumulative))
        new = self.model.encode_to_kv(evicted, context, None, self.meter)
        if self.config.strip_text_on_evict:
            new = strip_text(new)
        self.cumulative = evict_blocks(concat(self.cumulative, new), budget)

    def instant_blocks(self) -> list[TokenBlock]:
        blocks = list(self.buffer.blocks)
        if blocks and self.config.resolution_multiplier > 1 and blocks[-1].is_visual:
            blocks[-1] = boost_resolution(blocks[-1], self.config.resolution_multiplier, self.seed)
        return blocks

    def instant_build(self, meter: Meter | None = None) -> KVCache:
        """Instant cache from sink + buffer only; never looks at the cumulative cache."""
        blocks = self.instant_blocks()
        if not blocks:
            return self.model.empty_cache()
        return self.model.encode_to_kv(blocks, self.sink.cache(), None, meter)

    def _recent_cache(self, meter: Meter) -> KVCache:
        with meter.phase("instant"):
            return self.instant_build(meter)

    def _answer(self, query, max_new, meter, trace):
        sink = self.sink.cache()
        past = self._zeta_decode(self.cumulative)
        recent = self._recent_cache(meter)
        final = concat(sink, past, recent)
        result = self._decode(final, query, max_new, meter, trace)
        if self.config.buffer_text_policy == "include_responses":
            emb = np.concatenate([query.embeddings, self.model.embed_tokens(result.tokens)])
            with self.meter.phase("ingest"):
                self.buffer_push(TokenBlock.text(emb, query.block_id))
        return result, final, (len(sink), len(sink) + len(past))

    def stored_rows(self) -> int:
        return len(self.sink.cache()) + len(self.cumulative) if self.sink.filled else len(self.cumulative)

    def memory_bytes(self) -> int:
        sink = self.sink.frozen.cache.nbytes if self.sink.filled else 0
        return sink + self.cumulative.nbytes + self.buffer.nbytes


class ApproxDSCachePolicy(DSCachePolicy):
    """Reuses a cache of the buffer frames between periodic full rebuilds."""

    def __init__(self, model: Model, config: PolicyConfig, name: str | None = None, seed: int = 0):
        super().__init__(model, config, name, seed)
        self.recent = model.empty_cache()
        self.since_refresh = 0

    def buffer_push(self, block: TokenBlock) -> TokenBlock | None:
        evicted = super().buffer_push(block)
        if block.is_visual:
            self.since_refresh += 1
        if self.since_refresh >= self.config.refresh_period:
            self.recent = self.instant_build(self.meter)
            self.since_refresh = 0
        else:
            self._extend_recent(block)
        return evicted

    def _extend_recent(self, block: TokenBlock) -> None:
        live = {b.block_id for b in self.buffer.blocks}
        keep = np.flatnonzero(np.isin(self.recent.block_ids, list(live)))
        if len(keep) != len(self.recent):
            # drop rows of frames that left the buffer (always a prefix)
            self.recent = slice_cache(self.recent, int(keep[0]) if len(keep) else len(self.recent),
                                      len(self.recent))
        if block.block_id not in live:
            return
        context = concat(self.sink.cache(), self.recent)
        new = self.model.encode_to_kv(block, context, None, self.meter)
        self.recent = concat(self.recent, new)

    def _recent_cache(self, meter: Meter) -> KVCache:
        return self.recent

    def memory_bytes(self) -> int:
        return super().memory_bytes() + self.recent.nbytes

    def stored_rows(self) -> int:
        return super().stored_rows() + len(self.recent)


def make_policy(model: Model, config: PolicyConfig, name: str | None = None, seed: int = 0) -> StreamPolicy:
    if config.kind == "uniform":
        return UniformPolicy(model, config, name, seed)
    if config.kind == "offline":
        return OfflinePolicy(model, config, name)
    if config.kind == "dscache":
        return DSCachePolicy(model, config, name, seed)
    if config.kind == "approx":
        return ApproxDSCachePolicy(model, config, name, seed)
    raise ConfigurationError(f"unknown policy kind {config.kind!r}")
