import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import entropy as scipy_entropy

from dvsa.diff_core import DegenerateInputError
from dvsa.semantic_space import (
    SemanticFormatError,
    SemanticSpace,
    attribute_entropy,
    load_semantic,
    save_semantic,
    select_attributes,
)


def brute_force_selection(H):
    """Sort, take the median by hand, keep strictly-below entries; halve on total ties."""
    order = sorted(H)
    K = len(order)
    mu = order[K // 2] if K % 2 else 0.5 * (order[K // 2 - 1] + order[K // 2])
    chosen = [k for k in range(K) if H[k] < mu]
    return chosen or list(range(K // 2))


class TestEntropy:
    def test_uniform_column(self):
        S = np.ones((5, 2))
        np.testing.assert_allclose(attribute_entropy(S), [math.log(5)] * 2)

    def test_one_hot_column(self):
        S = np.array([[0.0, 1.0], [3.0, 1.0], [0.0, 1.0]])
        assert attribute_entropy(S)[0] == 0.0

    def test_hand_computed_column_against_scipy(self):
        S = np.array([[1.0, 1.0], [1.0, 1.0], [2.0, 1.0]])
        H = attribute_entropy(S)[0]
        hand = -(0.25 * math.log(0.25) * 2 + 0.5 * math.log(0.5))
        assert H == pytest.approx(1.0397207708, abs=1e-9)
        assert H == pytest.approx(hand, abs=1e-14)
        assert H == pytest.approx(scipy_entropy([1, 1, 2]), abs=1e-14)

    def test_zero_column_names_index(self):
        with pytest.raises(DegenerateInputError, match="column 1"):
            attribute_entropy(np.array([[1.0, 0.0], [1.0, 0.0]]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 8), st.integers(2, 6), st.floats(1e-3, 1e3), st.integers(0, 10_000))
    def test_scale_and_permutation_invariance(self, Q, K, alpha, seed):
        rng = np.random.default_rng(seed)
        S = rng.uniform(0.0, 1.0, (Q, K))
        S[0] += 0.1
        H = attribute_entropy(S)
        np.testing.assert_allclose(attribute_entropy(S * alpha), H, atol=1e-12)
        np.testing.assert_allclose(attribute_entropy(S[rng.permutation(Q)]), H, atol=1e-12)
        assert np.all(H >= -1e-15) and np.all(H <= math.log(Q) + 1e-12)


class TestSelection:
    def test_clean_split(self):
        sel = select_attributes([0.1, 0.9, 0.2, 0.8])
        assert sel.threshold == pytest.approx(0.5)
        assert sel.selected == (0, 2)

    def test_all_equal_fallback(self):
        assert select_attributes([0.3] * 7).selected == (0, 1, 2)

    def test_random_k9_matches_brute_force(self):
        rng = np.random.default_rng(9)
        H = list(rng.uniform(0, 2, 9))
        assert list(select_attributes(H).selected) == brute_force_selection(H)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 3, allow_nan=False), min_size=2, max_size=20))
    def test_size_bound(self, H):
        sel = select_attributes(H)
        K = len(H)
        assert 1 <= len(sel.selected) <= math.ceil(K / 2)
        if K % 2 == 0 and len(set(H)) == K:
            assert len(sel.selected) == K // 2


class TestSemanticSpace:
    def test_invariants(self):
        with pytest.raises(DegenerateInputError):
            SemanticSpace(S=np.array([[1.0, 0.0], [1.0, 0.0]]), attr_embed=np.ones((2, 3)))
        with pytest.raises(DegenerateInputError):
            SemanticSpace(S=np.ones((2, 2)), attr_embed=np.array([[1.0, 0.0], [0.0, 0.0]]))
        with pytest.raises(ValueError):
            SemanticSpace(S=np.ones((1, 2)), attr_embed=np.ones((2, 3)))

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        sp = SemanticSpace(S=rng.uniform(0.1, 1, (4, 3)), attr_embed=rng.standard_normal((3, 5)))
        save_semantic(sp, tmp_path / "s.txt")
        back = load_semantic(tmp_path / "s.txt")
        np.testing.assert_array_equal(back.S, sp.S)
        np.testing.assert_array_equal(back.attr_embed, sp.attr_embed)

    def test_loader_reports_line_numbers(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("2 2 3\n1 1\n1 1 1\n1 0 0\n0 1 0\n")
        with pytest.raises(SemanticFormatError, match=r":3: expected 2 values"):
            load_semantic(p)
        p.write_text("2 2 3\n1 1\n1 1\n1 0 0\n")
        with pytest.raises(SemanticFormatError, match="expected 4 data lines"):
            load_semantic(p)
