import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dscache.errors import ConfigurationError, ContractViolation, PositionOverflowError
from dscache.kvstore import ENCODED, PositionAssignment, concat, to_bytes
from dscache.model import ModelSpec, TokenBlock, Trace, build_model
from dscache.tensorcore import Rng, seeded_gaussian
from helpers import frames, max_abs, query
from oracles import forward_full, greedy_full


def _tokens(model, n, seed=0):
    return seeded_gaussian(Rng(seed).split("tok"), n, model.hidden)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ModelSpec(hidden_dim=65)
    with pytest.raises(ConfigurationError):
        ModelSpec(train_length_analogue=512, max_position=100)
    with pytest.raises(ConfigurationError):
        ModelSpec(head_dim=15)
    with pytest.raises(ConfigurationError):
        ModelSpec(precision="bf16")
    assert ModelSpec().max_position == 2048


def test_same_seed_same_outputs_different_seed_differs(small_model):
    x = TokenBlock.visual(_tokens(small_model, 5), 0)
    again = build_model(small_model.spec)
    _, z1 = small_model.encode(x, small_model.empty_cache())
    _, z2 = again.encode(x, again.empty_cache())
    assert np.array_equal(z1, z2)
    other = build_model(ModelSpec(**{**small_model.spec.__dict__, "seed": 4}))
    _, z3 = other.encode(x, other.empty_cache())
    assert not np.allclose(z1, z3)


def test_single_token_on_empty_cache_matches_oracle(model):
    x = _tokens(model, 1, 5)
    _, z = model.encode(TokenBlock.visual(x, 0), model.empty_cache())
    want, _, _ = forward_full(model, x)
    assert max_abs(z, want) <= 1e-12


def test_attention_shape_and_causality_within_block(model):
    ctx = model.encode_to_kv(TokenBlock.visual(_tokens(model, 7, 1), 0), model.empty_cache())
    tr = Trace()
    model.encode(TokenBlock.visual(_tokens(model, 4, 2), 1), ctx, trace=tr)
    for a in tr.attn_weights:
        assert a.shape == (4, 11)
        for r in range(4):
            assert np.all(a[r, 7 + r + 1:] == 0)
        assert np.allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_two_layer_six_tokens_split_three_three():
    m = build_model(ModelSpec(num_layers=2, seed=8))
    x = _tokens(m, 6, 3)
    _, full = m.encode(TokenBlock.visual(x, 0), m.empty_cache())
    c1, _ = m.encode(TokenBlock.visual(x[:3], 0), m.empty_cache())
    _, z2 = m.encode(TokenBlock.visual(x[3:], 1), c1)
    assert max_abs(full[3:], z2) <= 1e-10
    oracle, _, _ = forward_full(m, x)
    assert max_abs(full, oracle) <= 1e-10


@settings(max_examples=15, deadline=None)
@given(cuts=st.lists(st.integers(1, 39), min_size=1, max_size=5, unique=True))
def test_incremental_equals_one_shot_for_any_partition(model, cuts):
    x = _tokens(model, 40, 4)
    _, full = model.encode(TokenBlock.visual(x, 0), model.empty_cache())
    bounds = [0] + sorted(cuts) + [40]
    cache = model.empty_cache()
    outs = []
    for b, (lo, hi) in enumerate(zip(bounds, bounds[1:])):
        kv, z = model.encode(TokenBlock.visual(x[lo:hi], b), cache)
        cache = concat(cache, kv)
        outs.append(z)
    assert max_abs(np.concatenate(outs), full) <= 1e-10


def test_phi_shapes_and_context_dependence(model):
    x = TokenBlock.visual(_tokens(model, 5, 6), 9)
    empty = model.encode_to_kv(x, model.empty_cache())
    assert empty.num_layers == 4 and empty.uniform_len == 5 and empty.hidden == 64
    c1 = model.encode_to_kv(TokenBlock.visual(_tokens(model, 12, 7), 0), model.empty_cache())
    c2 = model.encode_to_kv(TokenBlock.visual(_tokens(model, 30, 8), 0), model.empty_cache())
    a, b = model.encode_to_kv(x, c1), model.encode_to_kv(x, c2)
    assert a.uniform_len == b.uniform_len == 5
    # layer-0 values only see the token itself; deeper values carry the context
    assert np.array_equal(a.layers[0].values, b.layers[0].values)
    assert max_abs(a.layers[-1].values, b.layers[-1].values) > 1e-3


def test_phi_does_not_touch_context(model):
    ctx = model.encode_to_kv(TokenBlock.visual(_tokens(model, 10, 9), 0), model.empty_cache())
    before = to_bytes(ctx)
    model.encode_to_kv(TokenBlock.visual(_tokens(model, 3, 10), 1), ctx)
    assert to_bytes(ctx) == before


def test_causality_by_perturbation(model):
    x = _tokens(model, 12, 11)
    _, base = model.encode(TokenBlock.visual(x, 0), model.empty_cache())
    for t in (3, 7, 11):
        y = x.copy()
        y[t] = 0.0
        _, z = model.encode(TokenBlock.visual(y, 0), model.empty_cache())
        assert np.array_equal(z[:t], base[:t])
        assert not np.array_equal(z[t], base[t])


def test_inconsistent_positions_rejected(model):
    ctx = model.encode_to_kv(TokenBlock.visual(_tokens(model, 4, 12), 0), model.empty_cache())
    with pytest.raises(ContractViolation):
        model.encode(TokenBlock.visual(_tokens(model, 2, 13), 1), ctx, PositionAssignment(0, 7))


def test_decode_contracts(model):
    ctx = model.encode_to_kv(frames(model, 3), model.empty_cache())
    q = query(model, 0)
    r0 = model.decode_greedy(ctx, q, 0)
    assert r0.tokens == [] and r0.cache.uniform_len == ctx.uniform_len + len(q)
    a = model.decode_greedy(ctx, q, 5)
    b = model.decode_greedy(ctx, q, 5)
    assert a.tokens == b.tokens and len(a.tokens) == 5
    assert a.hidden.shape == (len(q) + 4, 64)
    assert a.cache.uniform_len == ctx.uniform_len + len(q) + 4


def test_decode_from_incremental_cache_matches_from_scratch(model):
    blocks = frames(model, 4)
    cache = model.empty_cache()
    for b in blocks:
        cache = concat(cache, model.encode_to_kv(b, cache))
    q = query(model, 1)
    got = model.decode_greedy(cache, q, 4).tokens
    seq = np.concatenate([b.embeddings for b in blocks] + [q.embeddings])
    assert got == greedy_full(model, seq, 4)


def test_decode_position_overflow(model):
    spec = ModelSpec(num_layers=1, train_length_analogue=16, max_position=20)
    m = build_model(spec)
    ctx = m.encode_to_kv(TokenBlock.visual(_tokens(m, 16, 14), 0), m.empty_cache())
    with pytest.raises(PositionOverflowError):
        m.decode_greedy(ctx, query(m, 0), 4)
    m.decode_greedy(ctx, query(m, 0), 2)


def test_encoded_storage_keeps_rotated_keys(model):
    x = TokenBlock.visual(_tokens(model, 5, 15), 0)
    enc = model.encode_to_kv(x, model.empty_cache(ENCODED), PositionAssignment(0, 0))
    agn = model.encode_to_kv(x, model.empty_cache())
    assert enc.mode == ENCODED
    from dscache.rope import rope_apply_block
    for le, la in zip(enc.layers, agn.layers):
        assert np.array_equal(le.keys, rope_apply_block(la.keys, 0, model.rope))
        assert np.array_equal(le.values, la.values)


def test_precision_f32_runs(small_model):
    m = build_model(ModelSpec(**{**small_model.spec.__dict__, "precision": "f32"}))
    kv, z = m.encode(TokenBlock.visual(_tokens(m, 3, 16).astype(np.float32), 0), m.empty_cache())
    assert z.dtype == np.float32 and kv.dtype == np.float32
