"""A toy decoder-only RoPE transformer that runs against external KV caches.

Pre-norm layers (RMS norm, multi-head attention, residual, RMS norm, SiLU
FFN, residual) with frozen seeded weights. Nothing here knows about cache
policies; callers pass a context cache and a position layout and get back KV
entries for the new tokens only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .kvstore import AGNOSTIC, TEXT, VISUAL, KVCache, LayerKV, PositionAssignment, concat
from .rope import RopeParams, rope_rotate
from .tensorcore import Meter, Rng, dtype_for, matmul, rms_norm, seeded_gaussian, softmax_rows


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int = 4
    num_heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 128
    vocab_size: int = 256
    rope_base: float = 10000.0
    train_length_analogue: int = 512
    max_position: int | None = None  # defaults to 4x train_length_analogue
    seed: int = 0
    precision: str = "f64"
    hidden_dim: int | None = None

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "head_dim", "ffn_dim", "vocab_size", "train_length_analogue"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        expected = self.num_heads * self.head_dim
        if self.hidden_dim is None:
            object.__setattr__(self, "hidden_dim", expected)
        elif self.hidden_dim != expected:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} != num_heads * head_dim = {expected}")
        if self.max_position is None:
            object.__setattr__(self, "max_position", 4 * self.train_length_analogue)
        if self.train_length_analogue > self.max_position:
            raise ConfigurationError("train_length_analogue must not exceed max_position")
        dtype_for(self.precision)
        # validates head_dim / base
        self.rope

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.head_dim, self.rope_base, self.max_position)

    @property
    def dtype(self):
        return dtype_for(self.precision)


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    norm_attn: np.ndarray
    norm_ffn: np.ndarray


@dataclass(frozen=True)
class TokenBlock:
    """One time step of input: token embeddings plus per-token modality tags."""

    embeddings: np.ndarray
    tags: np.ndarray
    block_id: int
    frame_index: int | None = None

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.tags.shape != (self.embeddings.shape[0],):
            raise ConfigurationError("tag array must have one entry per token")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def is_visual(self) -> bool:
        return bool(np.all(self.tags == VISUAL))

    @classmethod
    def visual(cls, embeddings, block_id, frame_index=None) -> "TokenBlock":
        return cls(embeddings, np.full(len(embeddings), VISUAL, np.uint8), block_id, frame_index)

    @classmethod
    def text(cls, embeddings, block_id) -> "TokenBlock":
        return cls(embeddings, np.full(len(embeddings), TEXT, np.uint8), block_id)


def stack_blocks(blocks: Sequence[TokenBlock]):
    """Join blocks into one token sequence: (embeddings, tags, per-token block ids)."""
    emb = np.concatenate([b.embeddings for b in blocks])
    tags = np.concatenate([b.tags for b in blocks])
    ids = np.concatenate([np.full(len(b), b.block_id, np.int64) for b in blocks])
    return emb, tags, ids


@dataclass
class Trace:
    """Optional capture of per-layer attention internals during a forward."""

    attn_outputs: list = field(default_factory=list)
    # per layer: (n_new, n_keys) attention weights averaged over heads
    attn_weights: list = field(default_factory=list)


@dataclass
class DecodeResult:
    tokens: list[int]
    hidden: np.ndarray  # pre-logit (final-norm) hidden rows: prompt rows then one per generated token
    cache: KVCache  # context + prompt + all generated tokens but the last


def _silu(x):
    return x / (1.0 + np.exp(-x))


class Model:
    def __init__(self, spec: ModelSpec, layers: list[LayerWeights], embedding, final_norm, lm_head):
        self.spec = spec
        self.layers = tuple(layers)
        self.embedding = embedding
        self.final_norm = final_norm
        self.lm_head = lm_head
        self.rope = spec.rope
        for a in (embedding, final_norm, lm_head):
            a.flags.writeable = False

    @property
    def hidden(self) -> int:
        return self.spec.hidden_dim

    @property
    def dtype(self):
        return self.spec.dtype

    def empty_cache(self, mode: str = AGNOSTIC) -> KVCache:
        return KVCache.empty(self.spec.num_layers, self.hidden, self.dtype, mode)

    def layer_forward(self, r: int, z: np.ndarray, cache_layer: LayerKV, positions,
                      meter: Meter | None = None, trace: Trace | None = None):
        """One transformer layer over new rows ``z`` attending to ``cache_layer``.

        Returns the layer output and the new rows' (keys, values). Agnostic
        caches get their keys rotated here, per ``positions``; the returned
        keys are raw for agnostic storage and rotated for encoded storage.
        """
        w = self.layers[r]
        spec = self.spec
        n, L = z.shape[0], len(cache_layer)
        positions.check(L, cache_layer.mode)
        qpos = positions.query_positions(n)

        h = rms_norm(z, w.norm_attn)
        q = matmul(h, w.wq, meter)
        k = matmul(h, w.wk, meter)
        v = matmul(h, w.wv, meter)

        q_rot = rope_rotate(q, qpos, self.rope, meter)
        k_new_rot = rope_rotate(k, qpos, self.rope, meter)
        if cache_layer.mode == AGNOSTIC:
            k_old_rot = rope_rotate(cache_layer.keys, positions.key_positions(L), self.rope, meter)
            stored_k = k
        else:
            k_old_rot = cache_layer.keys
            stored_k = k_new_rot
        keys = np.concatenate([k_old_rot, k_new_rot])
        values = np.concatenate([cache_layer.values, v])

        valid = L + 1 + np.arange(n)
        scale = float(np.sqrt(spec.head_dim))
        heads = []
        weights_sum = None
        for hd in range(spec.num_heads):
            cols = slice(hd * spec.head_dim, (hd + 1) * spec.head_dim)
            scores = matmul(q_rot[:, cols], keys[:, cols].T, meter) / scale
            a = softmax_rows(scores, valid)
            heads.append(matmul(a, values[:, cols], meter))
            if trace is not None:
                weights_sum = a if weights_sum is None else weights_sum + a
        attn = matmul(np.concatenate(heads, axis=1), w.wo, meter)
        if trace is not None:
            trace.attn_outputs.append(attn)
            trace.attn_weights.append(weights_sum / spec.num_heads)

        z = z + attn
        up = matmul(rms_norm(z, w.norm_ffn), w.w_up, meter)
        z = z + matmul(_silu(up), w.w_down, meter)
        return z, stored_k, v

    def encode(self, x, context: KVCache, positions=None, meter: Meter | None = None,
               trace: Trace | None = None):
        """Run all layers over ``x`` against ``context``.

        Returns ``(new_kv, final_hidden)`` where ``new_kv`` covers the tokens of
        ``x`` only. ``x`` is a TokenBlock or a sequence of blocks encoded as
        one causal input. ``context`` is never modified.
        """
        blocks = [x] if isinstance(x, TokenBlock) else list(x)
        if positions is None:
            if context.mode != AGNOSTIC:
                raise ContractViolation("encoded caches need explicit positions")
            positions = PositionAssignment.contiguous(len(context))
        if not blocks:
            return self.empty_cache(context.mode), np.zeros((0, self.hidden), self.dtype)
        z, tags, ids = stack_blocks(blocks)
        z = z.astype(self.dtype, copy=False)
        new_layers = []
        base = int(positions.query_positions(len(z))[0])
        for r in range(self.spec.num_layers):
            z_next, k, v = self.layer_forward(r, z, context.layers[r], positions, meter, trace)
            new_layers.append(LayerKV(k, v, tags, ids, context.mode, base))
            z = z_next
        return KVCache(tuple(new_layers)), z

    def encode_to_kv(self, x, context: KVCache, positions=None, meter: Meter | None = None) -> KVCache:
        """The KV-construction operator: KV entries for the new tokens only."""
        return self.encode(x, context, positions, meter)[0]

    def logits(self, z: np.ndarray, meter: Meter | None = None):
        h = rms_norm(z, self.final_norm)
        return h, matmul(h, self.lm_head, meter)

    def embed_tokens(self, token_ids) -> np.ndarray:
        return np.asarray(self.embedding[np.asarray(token_ids, dtype=np.int64)])

    def decode_greedy(self, cache: KVCache, prompt: TokenBlock, max_new: int, positions=None,
                      meter: Meter | None = None, trace: Trace | None = None) -> DecodeResult:
        """Prefill ``prompt`` against ``cache`` then generate ``max_new`` tokens greedily.

        With the default positions the cache occupies ``0 .. len-1`` and the
        prompt follows it. Meter phases: "prefill" for the prompt, "decode"
        for generation (LM head included).
        """
        if max_new < 0:
            raise ConfigurationError("max_new must be >= 0")
        if positions is None:
            positions = PositionAssignment.contiguous(len(cache))
        mtr = meter if meter is not None else Meter()
        with mtr.phase("prefill"):
            new_kv, z = self.encode(prompt, cache, positions, mtr, trace)
        cache = concat(cache, new_kv)
        query_start = int(positions.query_positions(len(prompt))[0]) + len(prompt)
        with mtr.phase("decode"):
            h, logits = self.logits(z, mtr)
        hidden = [h]
        tokens: list[int] = []
        for i in range(max_new):
            tok = int(np.argmax(logits[-1]))
            tokens.append(tok)
            if i == max_new - 1:
                break
            step = TokenBlock.text(self.embed_tokens([tok]), prompt.block_id)
            step_pos = _advance(positions, len(cache), query_start)
            with mtr.phase("decode"):
                new_kv, z = self.encode(step, cache, step_pos, mtr, trace)
                h, logits = self.logits(z, mtr)
            hidden.append(h)
            cache = concat(cache, new_kv)
            query_start += 1
        return DecodeResult(tokens, np.concatenate(hidden), cache)


def _advance(positions, cache_len: int, query_start: int):
    if isinstance(positions, PositionAssignment):
        return PositionAssignment(positions.cache_start, query_start)
    # explicit layouts: keep the original key positions, extend contiguously
    keys = np.concatenate([positions.key_positions(len(positions.keys)),
                           positions.query_positions(len(positions.queries))])
    extra = cache_len - len(keys)
    if extra:
        keys = np.concatenate([keys, query_start - extra + np.arange(extra)])
    return type(positions)(keys, np.array([query_start]))


def build_model(spec: ModelSpec) -> Model:
    rng = Rng(spec.seed).split("model")
    d, f, dt = spec.hidden_dim, spec.ffn_dim, spec.dtype
    layers = []
    for r in range(spec.num_layers):
        lr = rng.split("layer", r)
        proj = lambda name, rows, cols: seeded_gaussian(lr.split(name), rows, cols, 1.0 / np.sqrt(rows), dt)
        w = LayerWeights(
            wq=proj("wq", d, d), wk=proj("wk", d, d), wv=proj("wv", d, d), wo=proj("wo", d, d),
            w_up=proj("up", d, f), w_down=proj("down", f, d),
            norm_attn=np.ones(d, dt), norm_ffn=np.ones(d, dt),
        )
        for a in vars(w).values():
            a.flags.writeable = False
        layers.append(w)
    embedding = seeded_gaussian(rng.split("embed"), spec.vocab_size, d, 1.0, dt)
    lm_head = seeded_gaussian(rng.split("lm_head"), d, spec.vocab_size, 1.0 / np.sqrt(d), dt)
    return Model(spec, layers, embedding, np.ones(d, dt), lm_head)
