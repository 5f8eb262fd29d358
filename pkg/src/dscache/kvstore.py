"""KV cache containers and the operations policies build on.

Caches are value-like: operations return new caches and the underlying arrays
are flagged read-only, so slicing can hand out numpy views safely.

Keys are normally stored *position-agnostic* (before RoPE) and rotated only
when a computation consumes them. The ``encoded`` storage mode keeps keys
already rotated at absolute positions; it exists to run the standard
construction side by side with the agnostic one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .rope import RopeParams, rope_rotate

VISUAL = 0
TEXT = 1

AGNOSTIC = "agnostic"
ENCODED = "encoded"


def _frozen(a: np.ndarray) -> np.ndarray:
    if a.flags.writeable:
        a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LayerKV:
    keys: np.ndarray
    values: np.ndarray
    tags: np.ndarray
    block_ids: np.ndarray
    mode: str = AGNOSTIC
    # first absolute position of an ``encoded`` layer; unused for agnostic storage
    base_position: int = 0

    def __post_init__(self):
        n = self.keys.shape[0]
        if not (self.values.shape[0] == n == self.tags.shape[0] == self.block_ids.shape[0]):
            raise ContractViolation("keys, values, tags and block_ids must have equal length")
        if self.keys.shape != self.values.shape:
            raise ContractViolation("keys and values must have the same shape")
        if self.mode not in (AGNOSTIC, ENCODED):
            raise ContractViolation(f"unknown storage mode {self.mode!r}")
        for a in (self.keys, self.values, self.tags, self.block_ids):
            _frozen(a)

    def __len__(self) -> int:
        return self.keys.shape[0]

    def rows(self, idx) -> "LayerKV":
        base = self.base_position
        if isinstance(idx, slice) and self.mode == ENCODED:
            base += idx.indices(len(self))[0]
        return LayerKV(self.keys[idx], self.values[idx], self.tags[idx], self.block_ids[idx],
                       self.mode, base)


@dataclass(frozen=True)
class KVCache:
    layers: tuple[LayerKV, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ContractViolation("a cache needs at least one layer")
        lengths = {len(layer) for layer in self.layers}
        if len(lengths) != 1:
            raise ContractViolation(f"layer lengths differ: {sorted(lengths)}")
        if len({layer.mode for layer in self.layers}) != 1:
            raise ContractViolation("mixed storage modes across layers")

    @classmethod
    def empty(cls, num_layers: int, hidden: int, dtype=np.float64, mode: str = AGNOSTIC) -> "KVCache":
        z = np.zeros((0, hidden), dtype=dtype)
        return cls(tuple(
            LayerKV(z, z, np.zeros(0, np.uint8), np.zeros(0, np.int64), mode)
            for _ in range(num_layers)
        ))

    @property
    def uniform_len(self) -> int:
        return len(self.layers[0])

    def __len__(self) -> int:
        return self.uniform_len

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def hidden(self) -> int:
        return self.layers[0].keys.shape[1]

    @property
    def mode(self) -> str:
        return self.layers[0].mode

    @property
    def dtype(self):
        return self.layers[0].keys.dtype

    @property
    def tags(self) -> np.ndarray:
        return self.layers[0].tags

    @property
    def block_ids(self) -> np.ndarray:
        return self.layers[0].block_ids

    @property
    def nbytes(self) -> int:
        return sum(l.keys.nbytes + l.values.nbytes for l in self.layers)

    def map_rows(self, idx) -> "KVCache":
        return KVCache(tuple(layer.rows(idx) for layer in self.layers))

    def equals(self, other: "KVCache") -> bool:
        """Bitwise equality of contents and metadata."""
        if self.num_layers != other.num_layers or self.mode != other.mode:
            return False
        for a, b in zip(self.layers, other.layers):
            if a.base_position != b.base_position and a.mode == ENCODED:
                return False
            for x, y in ((a.keys, b.keys), (a.values, b.values), (a.tags, b.tags),
                         (a.block_ids, b.block_ids)):
                if x.shape != y.shape or x.dtype != y.dtype or x.tobytes() != y.tobytes():
                    return False
        return True


@dataclass(frozen=True)
class SinkCache:
    """KV entries of the first ``l_A`` stream tokens; frozen once built."""

    cache: KVCache
    tokens: np.ndarray = field(repr=False)

    @property
    def length(self) -> int:
        return self.cache.uniform_len


@dataclass(frozen=True)
class PositionAssignment:
    """Contiguous position layout: cached keys from ``cache_start``, the new
    tokens from ``query_start``."""

    cache_start: int
    query_start: int

    @classmethod
    def contiguous(cls, cache_len: int, cache_start: int = 0) -> "PositionAssignment":
        return cls(cache_start, cache_start + cache_len)

    def key_positions(self, n: int) -> np.ndarray:
        return self.cache_start + np.arange(n, dtype=np.int64)

    def query_positions(self, n: int) -> np.ndarray:
        return self.query_start + np.arange(n, dtype=np.int64)

    def check(self, cache_len: int, mode: str = AGNOSTIC) -> None:
        if mode == AGNOSTIC and self.query_start != self.cache_start + cache_len:
            raise ContractViolation(
                f"positions not contiguous: cache at {self.cache_start} with {cache_len} rows, "
                f"queries at {self.query_start}")


@dataclass(frozen=True)
class ExplicitPositions:
    """Arbitrary per-row positions; used for negative controls."""

    keys: np.ndarray
    queries: np.ndarray

    def key_positions(self, n: int) -> np.ndarray:
        if len(self.keys) != n:
            raise ContractViolation(f"{len(self.keys)} key positions for {n} cached rows")
        return np.asarray(self.keys, dtype=np.int64)

    def query_positions(self, n: int) -> np.ndarray:
        if len(self.queries) != n:
            raise ContractViolation(f"{len(self.queries)} query positions for {n} new rows")
        return np.asarray(self.queries, dtype=np.int64)

    def check(self, cache_len: int, mode: str = AGNOSTIC) -> None:
        self.key_positions(cache_len)


def concat(*caches: KVCache) -> KVCache:
    if not caches:
        raise ContractViolation("concat needs at least one cache")
    first = caches[0]
    for c in caches[1:]:
        if c.num_layers != first.num_layers or c.hidden != first.hidden:
            raise ContractViolation("cannot concat caches of different shapes")
        if c.mode != first.mode:
            raise ContractViolation("cannot concat caches with different storage modes")
    nonempty = [c for c in caches if c.uniform_len]
    if len(nonempty) <= 1:
        return nonempty[0] if nonempty else first
    layers = []
    for r in range(first.num_layers):
        parts = [c.layers[r] for c in nonempty]
        layers.append(LayerKV(
            np.concatenate([p.keys for p in parts]),
            np.concatenate([p.values for p in parts]),
            np.concatenate([p.tags for p in parts]),
            np.concatenate([p.block_ids for p in parts]),
            first.mode,
            parts[0].base_position,
        ))
    return KVCache(tuple(layers))


def slice_cache(c: KVCache, start: int, stop: int) -> KVCache:
    if not 0 <= start <= stop <= c.uniform_len:
        raise ContractViolation(f"slice [{start}, {stop}) out of range for length {c.uniform_len}")
    return c.map_rows(slice(start, stop))


def evict_fifo(c: KVCache, budget: int) -> KVCache:
    """Keep the newest ``budget`` rows of every layer."""
    if budget < 0:
        raise ContractViolation("budget must be non-negative")
    n = c.uniform_len
    if n <= budget:
        return c
    return slice_cache(c, n - budget, n)


def evict_blocks(c: KVCache, budget: int) -> KVCache:
    """FIFO eviction at block granularity: drop whole oldest blocks until at
    most ``budget`` rows remain."""
    n = c.uniform_len
    if n <= budget:
        return c
    ids = c.block_ids
    cut = n - budget
    # advance the cut to the next block boundary so no block is split
    while 0 < cut < n and ids[cut] == ids[cut - 1]:
        cut += 1
    return slice_cache(c, cut, n)


def subsample_recent(c: KVCache, l_L: int) -> KVCache:
    """Default subsampler: the most recent ``l_L`` rows."""
    if l_L < 0:
        raise ContractViolation("l_L must be non-negative")
    n = c.uniform_len
    return slice_cache(c, max(0, n - l_L), n)


def subsample_stride(c: KVCache, stride: int, group: int = 1) -> KVCache:
    """Keep every ``stride``-th group of ``group`` rows, counting back from the
    newest group so the most recent entries always survive."""
    if stride < 1 or group < 1:
        raise ContractViolation("stride and group must be >= 1")
    n = c.uniform_len
    if stride == 1 or n == 0:
        return c
    groups = np.arange(n) // group
    last = groups[-1]
    keep = np.flatnonzero((last - groups) % stride == 0)
    return c.map_rows(keep)


def strip_text(c: KVCache) -> KVCache:
    keep = np.flatnonzero(c.tags != TEXT)
    if len(keep) == c.uniform_len:
        return c
    return c.map_rows(keep)


def assign_positions(c: KVCache, start: int, params: RopeParams, meter=None) -> list[np.ndarray]:
    """Rotate stored keys at ``start, start+1, ...``; the cache is untouched."""
    if c.mode != AGNOSTIC:
        raise ContractViolation("positions can only be assigned to position-agnostic caches")
    pos = start + np.arange(c.uniform_len, dtype=np.int64)
    return [rope_rotate(layer.keys, pos, params, meter) for layer in c.layers]


# -- snapshot serialization -------------------------------------------------

_MAGIC = b"DSKV"
_HEADER = struct.Struct("<4sHBBQQQq")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_MODES = {0: AGNOSTIC, 1: ENCODED}


def to_bytes(c: KVCache) -> bytes:
    dcode = {v: k for k, v in _DTYPES.items()}[np.dtype(c.dtype).newbyteorder("<")]
    mcode = {v: k for k, v in _MODES.items()}[c.mode]
    n, h = c.uniform_len, c.hidden
    out = [_HEADER.pack(_MAGIC, 1, dcode, mcode, c.num_layers, n, h, c.layers[0].base_position)]
    dt = _DTYPES[dcode]
    for layer in c.layers:
        out.append(layer.keys.astype(dt, copy=False).tobytes())
        out.append(layer.values.astype(dt, copy=False).tobytes())
        out.append(layer.tags.astype(np.uint8, copy=False).tobytes())
        out.append(layer.block_ids.astype("<i8", copy=False).tobytes())
    return b"".join(out)


def from_bytes(data: bytes) -> KVCache:
    magic, version, dcode, mcode, num_layers, n, h, base = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC or version != 1:
        raise ValueError("not a KV snapshot (bad magic or version)")
    dt, mode = _DTYPES[dcode], _MODES[mcode]
    off = _HEADER.size
    layers = []

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).copy()
        off += arr.nbytes
        return arr

    for _ in range(num_layers):
        keys = take(n * h, dt).reshape(n, h)
        values = take(n * h, dt).reshape(n, h)
        tags = take(n, np.uint8)
        ids = take(n, np.dtype("<i8"))
        layers.append(LayerKV(keys, values, tags, ids, mode, base))
    if off != len(data):
        raise ValueError("trailing bytes after KV snapshot")
    return KVCache(tuple(layers))


def save(c: KVCache, path) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(c))


def load(path) -> KVCache:
    with open(path, "rb") as f:
        return from_bytes(f.read())
