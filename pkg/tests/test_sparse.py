import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pka import autodiff as ad
from pka import counters
from pka.dense import AttentionInputs, masked_attention_oracle
from pka.layout import AlignmentError, ModalityLayout, build_mask
from pka.sparse import (DegenerateMaskError, PartialAttention, band, block_partial, combine, keyword_scores, ksa,
                        ksa_mask, ksa_mask_or_fallback, merge_partials, paa, segment_partials, sparse_attention)
from pka.tensor import ContractError, Rng


def qkv(seed, h, rows, cols, d, dtype=np.float64):
    r = Rng(seed)
    return r.normal((h, rows, d), dtype=dtype), r.normal((h, cols, d), dtype=dtype), r.normal((h, cols, d), dtype=dtype)


def test_paa_alone_returns_aligned_values():
    q, k, v = qkv(0, 2, 6, 6, 3)
    np.testing.assert_allclose(paa(q, k, v).finalize(), v)


def test_paa_alignment_error():
    q, k, v = qkv(0, 1, 4, 5, 3)
    with pytest.raises(AlignmentError):
        paa(q, k, v)


def test_paa_allocates_linear_score_storage():
    q, k, v = qkv(1, 4, 64, 64, 8, np.float32)
    with counters.counting() as c:
        paa(q, k, v, block="X->SP1")
    assert c.blocks["X->SP1"].pairs == 64
    assert c.peak_alloc_entries == 64


def test_two_spatial_conditions_contribute_one_logit_each():
    L = ModalityLayout(2, (3, 3), 2, (), (0,))
    spec = build_mask(L, "pka")
    r = Rng(2)
    inp = AttentionInputs(*(r.normal((2, L.L, 4), dtype=np.float64) for _ in range(3)), L)
    with counters.counting() as c:
        segment_partials(inp, spec, "X")
    assert c.blocks["X->SP1"].pairs == c.blocks["X->SP2"].pairs == 9
    np.testing.assert_allclose(sparse_attention(inp, spec), masked_attention_oracle(inp, spec), atol=1e-12)


def test_keyword_mask_examples():
    # N=4, one keyword; logits [10,0,0,0] built from q against a unit key
    k_text = np.zeros((1, 1, 1))
    k_text[0, 0, 0] = 1.0
    qx = np.array([10.0, 0, 0, 0]).reshape(1, 4, 1)
    m = ksa_mask(qx, k_text, [0], 0.2)
    np.testing.assert_array_equal(m.active, [True, False, False, False])
    assert m.epsilon == 0.2 and m.step_index == 0

    flat = np.zeros((1, 4, 1))
    assert ksa_mask(flat, k_text, [0], 0.2).active.all()
    flat16 = np.zeros((1, 16, 1))
    with pytest.raises(DegenerateMaskError):
        ksa_mask(flat16, k_text, [0], 0.2)
    fb = ksa_mask_or_fallback(flat16, k_text, [0], 0.2)
    assert fb.fallback and fb.active.all()


@given(st.integers(0, 1000), st.sampled_from(["softmax", "relative"]))
def test_epsilon_zero_activates_everything(seed, mode):
    q, k, _ = qkv(seed, 2, 9, 3, 4)
    assert ksa_mask(q, k, [0, 2], 0.0, mode).active.all()


def test_relative_mode_peaks_at_one():
    q, k, _ = qkv(3, 2, 9, 3, 4)
    s = keyword_scores(q, k, [1], mode="relative")
    assert s.max() == pytest.approx(1.0)
    soft = keyword_scores(q, k, [1])
    np.testing.assert_allclose(s, soft / soft.max())


def test_keyword_scores_head_average_by_hand():
    q, k, _ = qkv(4, 3, 5, 4, 2)
    logits = np.zeros(5)
    for h in range(3):
        for i in range(5):
            logits[i] += (q[h, i] @ (k[h, 0] + k[h, 3])) / np.sqrt(2) / 3
    p = np.exp(logits - logits.max())
    np.testing.assert_allclose(keyword_scores(q, k, [0, 3]), p / p.sum(), rtol=1e-12)


def test_mask_validation():
    q, k, _ = qkv(5, 1, 4, 2, 2)
    for eps in (-0.1, 1.0):
        with pytest.raises(ContractError):
            ksa_mask(q, k, [0], eps)
    with pytest.raises(ContractError):
        keyword_scores(q, k, [])
    with pytest.raises(ContractError):
        ksa(q, k, k, np.ones(3, bool))


def test_ksa_all_active_is_a_dense_block():
    q, k, v = qkv(6, 2, 7, 3, 4)
    a = ksa(q, k, v, np.ones(7, bool)).finalize()
    np.testing.assert_array_equal(a, block_partial(q, k, v).finalize())


def test_ksa_counts_active_rows_only():
    q, k, v = qkv(7, 2, 10, 3, 4)
    active = np.zeros(10, bool)
    active[[1, 4, 5, 8]] = True
    with counters.counting() as c:
        ksa(q, k, v, active, block="X->SJ1")
    assert c.blocks["X->SJ1"].pairs == 4 * 3


def test_all_inactive_subject_equals_oracle_without_block():
    L = ModalityLayout(2, (2, 3), 1, (3,), (0,))
    off = build_mask(L, "pka", kw_mask=np.zeros(6, bool))
    r = Rng(8)
    inp = AttentionInputs(*(r.normal((2, L.L, 4), dtype=np.float64) for _ in range(3)), L)
    reduced = build_mask(L, "pka")
    del reduced.rules[("X", "SJ1")]
    np.testing.assert_allclose(sparse_attention(inp, off), masked_attention_oracle(inp, reduced), atol=1e-12)


def test_forty_percent_active_fp32():
    L = ModalityLayout(4, (4, 5), 1, (4,), (1,))
    active = np.zeros(20, bool)
    active[Rng(9).permutation(20)[:8]] = True
    spec = build_mask(L, "pka", kw_mask=active)
    r = Rng(10)
    inp = AttentionInputs(*(r.normal((2, L.L, 8), dtype=np.float32) for _ in range(3)), L)
    assert np.abs(sparse_attention(inp, spec) - masked_attention_oracle(inp, spec)).max() <= 1e-5


def test_batched_ksa_mask_matches_per_sample():
    r = Rng(11)
    q = r.normal((3, 2, 6, 4), dtype=np.float64)
    k = r.normal((3, 2, 2, 4), dtype=np.float64)
    v = r.normal((3, 2, 2, 4), dtype=np.float64)
    active = r.uniform((3, 6)) < 0.5
    out = ksa(q, k, v, active)
    for b in range(3):
        one = ksa(q[b], k[b], v[b], active[b])
        np.testing.assert_array_equal(out.m[b], one.m)
        np.testing.assert_array_equal(out.num[b], one.num)


def test_merge_with_empty_is_identity():
    q, k, v = qkv(12, 2, 5, 4, 3)
    p = block_partial(q, k, v)
    e = PartialAttention.empty((2,), 5, 3, np.float64)
    np.testing.assert_array_equal(merge_partials([p, e]), p.finalize())


def test_merge_order_independent_fp32():
    q, _, _ = qkv(13, 2, 6, 1, 4, np.float32)
    parts = [block_partial(q, *qkv(14 + i, 2, 6, 3 + i, 4, np.float32)[1:]) for i in range(3)]
    base = merge_partials(parts)
    for perm in itertools.permutations(range(3)):
        assert np.abs(merge_partials([parts[i] for i in perm]) - base).max() <= 1e-6


def test_merge_equals_single_softmax_over_union():
    q, k1, v1 = qkv(15, 1, 4, 3, 2)
    _, k2, v2 = qkv(16, 1, 4, 5, 2)
    merged = merge_partials([block_partial(q, k1, v1), block_partial(q, k2, v2)])
    whole = block_partial(q, np.concatenate([k1, k2], 1), np.concatenate([v1, v2], 1)).finalize()
    np.testing.assert_allclose(merged, whole, atol=1e-14)


def test_merge_rejects_rows_without_keys():
    e = PartialAttention.empty((1,), 3, 2, np.float64)
    with pytest.raises(ContractError):
        merge_partials([e])
    with pytest.raises(ContractError):
        combine([])
    q, k, v = qkv(17, 1, 3, 2, 2)
    with pytest.raises(ContractError):
        combine([block_partial(q, k, v), PartialAttention.empty((1,), 4, 2, np.float64)])


def test_band_k1_equals_paa():
    q, k, v = qkv(18, 2, 12, 12, 3)
    np.testing.assert_allclose(band(q, k, v, (3, 4), 1).finalize(), paa(q, k, v).finalize(), atol=1e-15)


def test_mask_is_constant_under_differentiation():
    q, k, v = qkv(19, 1, 4, 2, 3)
    active = np.array([True, False, True, False])
    tape = ad.Tape()
    qv = tape.leaf(q)
    out = ad.sum(ksa(qv, k, v, active).num)
    g = tape.backward(out)[qv.index]
    assert np.all(g[:, ~active] == 0)
    assert all(op in ad.PRIMITIVES or op == "leaf" for op in tape.ops())


layouts = st.builds(
    lambda M, side, c, subj, kw: ModalityLayout(M, (side, side), c, tuple(subj), (min(kw, M - 1),)),
    st.sampled_from([2, 8]), st.sampled_from([2, 4]), st.integers(0, 3),
    st.lists(st.integers(1, 4), max_size=2), st.integers(0, 7),
)


@given(layouts, st.integers(0, 10_000), st.sampled_from(["pka", "band"]), st.floats(0, 1),
       st.sampled_from([np.float32, np.float64]))
def test_sparse_engine_matches_oracle(L, seed, mode, frac, dtype):
    r = Rng(seed)
    active = (r.uniform(L.N) < frac) if L.n_subject else None
    spec = build_mask(L, mode, k=3 if mode == "band" else None, kw_mask=active)
    inp = AttentionInputs(*(r.normal((2, L.L, 4), dtype=dtype) for _ in range(3)), L)
    tol = 1e-5 if dtype == np.float32 else 1e-10
    assert np.abs(sparse_attention(inp, spec) - masked_attention_oracle(inp, spec)).max() <= tol


def test_fallback_never_leaves_a_zero_key_row():
    # exhaustive over every activation pattern of a small image, with and without fallback
    L = ModalityLayout(2, (2, 2), 1, (2,), (0,))
    r = Rng(20)
    inp = AttentionInputs(*(r.normal((1, L.L, 2), dtype=np.float64) for _ in range(3)), L)
    for bits in itertools.product([False, True], repeat=4):
        for fallback in (False, True):
            active = np.array(bits)
            if fallback and not active.any():
                active = ksa_mask_or_fallback(np.zeros((1, 4, 2)), np.zeros((1, 2, 2)), [0], 0.9).active
            spec = build_mask(L, "pka", kw_mask=active)
            parts = segment_partials(inp, spec, "X")
            assert np.isfinite(combine(parts).m).all()
            out = sparse_attention(inp, spec)
            assert np.isfinite(out).all()
