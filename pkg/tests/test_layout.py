import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pka.layout import (AlignmentError, AttentionMaskSpec, ModalityLayout, band_neighbours, block_mask,
                        build_mask, permitted_pairs, row_key_counts, to_dense)
from pka.tensor import ContractError


def lay(M=2, grid=(2, 2), c=1, subj=(), kw=(0,)):
    return ModalityLayout(M, grid, c, subj, kw)


def test_segments_are_ordered_and_disjoint():
    L = ModalityLayout(3, (2, 3), 2, (4, 1), (1,))
    names = [s.name for s in L.segments]
    assert names == ["T", "X", "SP1", "SP2", "SJ1", "SJ2"]
    starts = [s.start for s in L.segments]
    assert starts == [0, 3, 9, 15, 21, 25]
    assert L.L == 3 + 6 + 2 * 6 + 5


@pytest.mark.parametrize("kw", [(), (2,), (-1,)])
def test_keywords_validated(kw):
    with pytest.raises(ContractError):
        ModalityLayout(2, (2, 2), 0, (), kw)


def test_misaligned_spatial_grid():
    L = ModalityLayout(2, (2, 2), 1, (), (0,), spatial_grids=((3, 3),))
    with pytest.raises(AlignmentError):
        build_mask(L, "pka")
    # the dense baseline does not need alignment
    assert permitted_pairs(build_mask(L, "dense")) == L.L ** 2


def test_pka_diagonal_block():
    spec = build_mask(lay(), "pka")
    m = block_mask(spec, "X", "SP1")
    assert {tuple(p) for p in np.argwhere(m)} == {(i, i) for i in range(4)}


def test_pka_rules_match_the_block_structure():
    L = ModalityLayout(2, (2, 2), 2, (3,), (0,))
    spec = build_mask(L, "pka")
    kinds = {k: r.kind for k, r in spec.rules.items()}
    assert kinds[("T", "T")] == kinds[("T", "X")] == kinds[("X", "T")] == kinds[("X", "X")] == "all"
    assert kinds[("X", "SP1")] == kinds[("X", "SP2")] == "diagonal"
    assert kinds[("X", "SJ1")] == "all"
    for cond in ("SP1", "SP2", "SJ1"):
        assert [k for (q, k) in spec.rules if q == cond] == [cond]
    assert ("T", "SP1") not in spec.rules


def test_band_neighbourhoods_on_2x2():
    L = lay()
    k1 = block_mask(build_mask(L, "band", k=1), "X", "SP1")
    np.testing.assert_array_equal(k1, np.eye(4, dtype=bool))
    k3 = block_mask(build_mask(L, "band", k=3), "X", "SP1")
    assert k3[0].sum() == 4  # itself plus 3 in-grid neighbours


@pytest.mark.parametrize("k", [0, 2, -1, None])
def test_band_needs_odd_k(k):
    with pytest.raises(ContractError):
        build_mask(lay(), "band", k=k)


def test_dense_full_counts():
    L = ModalityLayout(2, (2, 2), 1, (), (0,))  # L = 10
    assert permitted_pairs(build_mask(L, "dense")) == 100


def test_reference_instance_counts():
    L = ModalityLayout(8, (8, 8), 1, (), (0,))
    assert L.L == 136
    assert permitted_pairs(build_mask(L, "dense")) == 18_496
    assert permitted_pairs(build_mask(L, "pka")) == 8 * 72 + 64 * 8 + 64 * 64 + 64 * 1 + 64 * 64 == 9_344


def test_pair_counts_affine_vs_quadratic_in_c():
    pka = [permitted_pairs(build_mask(ModalityLayout(8, (8, 8), c), "pka")) for c in range(1, 6)]
    dense = [permitted_pairs(build_mask(ModalityLayout(8, (8, 8), c), "dense")) for c in range(1, 6)]
    assert set(np.diff(pka)) == {64 + 64 * 64}
    assert set(np.diff(pka, 2)) == {0}
    assert set(np.diff(dense, 2)) == {2 * 64 * 64}


def test_keyword_gating():
    active = np.array([True, False, False, True])
    spec = build_mask(lay(subj=(3,)), "pka", kw_mask=active)
    m = block_mask(spec, "X", "SJ1")
    np.testing.assert_array_equal(m.any(axis=1), active)
    assert m.sum() == 6
    with pytest.raises(ContractError):
        build_mask(lay(subj=(3,)), "pka", kw_mask=np.ones(5, bool))


def test_unknown_mode():
    with pytest.raises(ContractError):
        build_mask(lay(), "swa")


layouts = st.builds(
    lambda M, h, w, c, subj: ModalityLayout(M, (h, w), c, tuple(subj), (M - 1,)),
    st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 3),
    st.lists(st.integers(1, 3), max_size=2),
)


@given(layouts, st.sampled_from(["dense", "pka", "band"]), st.sampled_from([1, 3, 5]))
def test_closed_form_counts_match_materialized_mask(L, mode, k):
    spec = build_mask(L, mode, k=k)
    dense = to_dense(spec)
    assert permitted_pairs(spec) == dense.sum()
    np.testing.assert_array_equal(row_key_counts(spec), dense.sum(axis=1))
    assert dense.any(axis=1).all()


@given(layouts)
def test_band_pairs_monotone_in_k_and_bounded(L):
    counts = [permitted_pairs(build_mask(L, "band", k=k)) for k in (1, 3, 5, 7)]
    assert counts == sorted(counts)
    assert counts[-1] <= L.L ** 2
    assert counts[0] == permitted_pairs(build_mask(L, "pka"))
    np.testing.assert_array_equal(to_dense(build_mask(L, "band", k=1)), to_dense(build_mask(L, "pka")))


@given(st.integers(1, 5), st.integers(1, 5), st.sampled_from([1, 3, 5]))
def test_band_neighbours_against_brute_force(H, W, k):
    idx, valid = band_neighbours((H, W), k)
    r = (k - 1) // 2
    for i in range(H * W):
        y, x = divmod(i, W)
        expect = {j for j in range(H * W) if max(abs(j // W - y), abs(j % W - x)) <= r}
        assert set(idx[i][valid[i]].tolist()) == expect


@given(layouts, st.data())
def test_spec_json_roundtrip(L, data):
    active = None
    if L.n_subject:
        active = np.array(data.draw(st.lists(st.booleans(), min_size=L.N, max_size=L.N)))
        active[0] = True
    spec = build_mask(L, "pka", kw_mask=active)
    back = AttentionMaskSpec.from_dict(json.loads(spec.to_json()))
    assert back.layout == L
    np.testing.assert_array_equal(to_dense(back), to_dense(spec))


def test_exhaustive_small_layouts_keep_a_key_per_row():
    for M in (1, 2):
        for grid in ((1, 1), (1, 2), (2, 2)):
            for c in range(3):
                for subj in ((), (1,), (2, 1)):
                    L = ModalityLayout(M, grid, c, subj, (0,))
                    for n_on in range(L.N + 1):
                        active = np.arange(L.N) < n_on
                        spec = build_mask(L, "pka", kw_mask=active if subj else None)
                        assert row_key_counts(spec).min() >= 1
