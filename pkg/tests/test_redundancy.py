import numpy as np
import pytest
from hypothesis import given, strategies as st

from pka.redundancy import ValidationError, band_mass, keyword_sparsity
from pka.tensor import Rng


def double_loop(attn, grid, r):
    H, W = grid
    n = H * W
    total = 0.0
    for i in range(n):
        for j in range(n):
            if max(abs(i // W - j // W), abs(i % W - j % W)) <= r:
                total += attn[i, j]
    return total / n


def test_identity_is_all_diagonal():
    assert band_mass(np.eye(9), (3, 3), [0]).mass == [1.0]


def test_uniform_share():
    prof = band_mass(np.full((16, 16), 1 / 16), (4, 4), [0, 1])
    assert prof.mass[0] == pytest.approx(1 / 16)
    assert prof.mass == pytest.approx(prof.uniform_baseline((4, 4)))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 999))
def test_against_double_loop(H, W, seed):
    n = H * W
    a = Rng(seed).uniform((n, n)) + 1e-3
    a /= a.sum(axis=1, keepdims=True)
    radii = [0, 1, 2, 3]
    prof = band_mass(a, (H, W), radii)
    assert prof.mass == pytest.approx([double_loop(a, (H, W), r) for r in radii], abs=1e-12)
    assert prof.mass == sorted(prof.mass)
    assert prof.mass[-1] == pytest.approx(1.0, abs=1e-6) or max(H, W) - 1 > 3


def test_head_average_and_provenance():
    a = np.stack([np.eye(4), np.full((4, 4), 0.25)])
    prof = band_mass(a, (2, 2), [0], {"layer": 1, "head": "mean"})
    assert prof.mass == [pytest.approx((1 + 0.25) / 2)]
    assert prof.to_dict()["provenance"] == {"layer": 1, "head": "mean"}


def test_validation():
    with pytest.raises(ValidationError):
        band_mass(np.ones((4, 4)), (2, 2), [0])
    with pytest.raises(ValidationError):
        band_mass(np.eye(4), (3, 3), [0])
    bad = np.eye(4)
    bad[0] = [1.5, -0.5, 0, 0]
    with pytest.raises(ValidationError):
        band_mass(bad, (2, 2), [0])


def test_keyword_sparsity_examples():
    s = Rng(0).uniform(10)
    assert keyword_sparsity(s, 0.0) == 1.0
    one_hot = np.eye(8)[3]
    assert keyword_sparsity(one_hot, 0.2) == 1 / 8


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(0, 1), st.floats(0, 1))
def test_sparsity_monotone_in_epsilon(scores, e1, e2):
    lo, hi = sorted((e1, e2))
    assert keyword_sparsity(scores, hi) <= keyword_sparsity(scores, lo)
