import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dscache.errors import ContractViolation, PositionOverflowError
from dscache.rope import RopeParams, relative_score, rope_apply, rope_apply_block, rope_rotate
from dscache.tensorcore import Rng, seeded_gaussian
from oracles import rope_complex

P16 = RopeParams(16, 10000.0, 2048)


def test_position_zero_is_bitwise_identity():
    x = seeded_gaussian(Rng(1), 1, 16)[0]
    assert np.array_equal(rope_apply(x, 0, P16), x)


def test_isometry():
    gen = Rng(2).generator()
    for _ in range(50):
        x = gen.standard_normal(16)
        p = int(gen.integers(0, 2049))
        assert abs(np.linalg.norm(rope_apply(x, p, P16)) - np.linalg.norm(x)) <= 1e-12


def test_head_dim_4_example_matches_pair_oracle():
    p = RopeParams(4, 10000.0, 16)
    got = rope_apply(np.array([1.0, 0.0, 1.0, 0.0]), 1, p)
    assert np.max(np.abs(got - rope_complex([1, 0, 1, 0], 1, 4))) <= 1e-12
    # cos/sin of 1 and of 0.01, frozen from the oracle
    want = [0.5403023058681398, 0.8414709848078965, 0.9999500004166653, 0.009999833334166664]
    assert np.max(np.abs(got - want)) <= 1e-12


def test_rotate_matches_complex_oracle_on_multi_head_rows():
    x = seeded_gaussian(Rng(3), 5, 64)
    pos = np.array([0, 1, 17, 511, 2048])
    got = rope_rotate(x, pos, P16)
    for r in range(5):
        assert np.max(np.abs(got[r] - rope_complex(x[r], pos[r], 16))) <= 1e-12


def test_overflow_and_negative_positions():
    x = np.ones(16)
    rope_apply(x, 2048, P16)
    with pytest.raises(PositionOverflowError):
        rope_apply(x, 2049, P16)
    with pytest.raises(ContractViolation):
        rope_apply(x, -1, P16)
    with pytest.raises(PositionOverflowError):
        rope_apply_block(np.ones((3, 16)), 2047, P16)


def test_block_equals_per_token_calls():
    m = seeded_gaussian(Rng(4), 6, 16)
    blk = rope_apply_block(m, 9, P16)
    for i in range(6):
        assert np.array_equal(blk[i], rope_apply(m[i], 9 + i, P16))
    assert np.array_equal(rope_apply_block(m[:1], 0, P16), m[:1])


def test_block_scores_invariant_to_start():
    q = seeded_gaussian(Rng(5).split("q"), 6, 16)
    k = seeded_gaussian(Rng(5).split("k"), 6, 16)
    s0 = rope_apply_block(q, 0, P16) @ rope_apply_block(k, 0, P16).T
    s7 = rope_apply_block(q, 7, P16) @ rope_apply_block(k, 7, P16).T
    assert np.max(np.abs(s0 - s7)) <= 1e-10


def test_relative_score_examples():
    q = seeded_gaussian(Rng(6).split("q"), 1, 16)[0]
    k = seeded_gaussian(Rng(6).split("k"), 1, 16)[0]
    assert abs(relative_score(q, k, 9, 9, P16) - float(q @ k)) <= 1e-12
    assert abs(relative_score(q, k, 5, 3, P16) - relative_score(q, k, 12, 10, P16)) <= 1e-10
    assert abs(relative_score(q, k, 5, 3, P16) - relative_score(q, k, 6, 3, P16)) > 1e-6
    with pytest.raises(ContractViolation):
        relative_score(q, k, 2, 3, P16)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), j=st.integers(0, 1000), gap=st.integers(0, 500),
       shift=st.integers(-1000, 500))
def test_shift_invariance_property(seed, j, gap, shift):
    i = j + gap
    shift = max(shift, -j)
    gen = Rng(seed).generator()
    q, k = gen.standard_normal(16), gen.standard_normal(16)
    a = relative_score(q, k, i, j, P16)
    b = relative_score(q, k, i + shift, j + shift, P16)
    assert abs(a - b) <= 1e-10
