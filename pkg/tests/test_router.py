"""Routing math: softmax, top-k selection, confidence."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import selection_from_logits
from moetrim.errors import ValidationError
from moetrim.router import (
    ExpertSelection,
    Phase,
    RoutingLogits,
    confidence,
    route_batch,
    softmax_probs,
    top_k_select,
)


class TestSoftmax:
    def test_two_logit_case(self):
        p = softmax_probs(np.array([[math.log(2.0), 0.0]]))
        assert abs(p[0, 0] - 2.0 / 3.0) < 1e-12
        assert abs(p[0, 1] - 1.0 / 3.0) < 1e-12

    def test_constant_row_is_uniform(self):
        p = softmax_probs(np.full((3, 8), 4.2))
        assert np.allclose(p, 0.125, atol=1e-12)

    def test_matches_reference_implementation(self, rng):
        from scipy.special import softmax as ref_softmax

        for _ in range(50):
            rows = rng.normal(0.0, 5.0, size=(rng.integers(1, 9), rng.integers(2, 17)))
            ours = softmax_probs(rows)
            theirs = ref_softmax(rows, axis=-1)
            assert np.max(np.abs(ours - theirs)) < 1e-12

    def test_shift_invariance(self, rng):
        rows = rng.normal(0.0, 3.0, size=(4, 6))
        shifted = rows + rng.normal(0.0, 50.0, size=(4, 1))
        assert np.allclose(softmax_probs(rows), softmax_probs(shifted), atol=1e-12)

    def test_large_magnitudes_stay_finite(self):
        rows = np.array([[1e8, 1e8 - 3.0, 0.0], [-1e8, -1e8 + 1.0, -1e8 + 2.0]])
        p = softmax_probs(rows)
        assert np.all(np.isfinite(p))
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValidationError):
            softmax_probs(np.array([[0.0, np.nan]]))
        with pytest.raises(ValidationError):
            softmax_probs(np.array([[0.0, np.inf]]))

    def test_rejects_empty(self):
        with pytest.raises(ValidationError):
            softmax_probs(np.zeros((0, 4)))

    @given(
        row=st.lists(st.floats(-100, 100), min_size=2, max_size=12),
        shift=st.floats(-1000, 1000),
    )
    @settings(max_examples=200, deadline=None)
    def test_probability_simplex_and_shift(self, row, shift):
        base = softmax_probs(np.array([row]))
        moved = softmax_probs(np.array([row]) + shift)
        assert np.all(base >= 0.0) and np.all(base <= 1.0)
        assert abs(base.sum() - 1.0) < 1e-9
        assert np.allclose(base, moved, atol=1e-9)


class TestTopK:
    def test_tie_prefers_smaller_index(self):
        ids, probs = top_k_select(np.array([0.1, 0.4, 0.4, 0.1]), 2)
        assert ids.tolist() == [1, 2]
        assert probs.tolist() == [0.4, 0.4]

    def test_rank_order(self):
        ids, probs = top_k_select(np.array([0.05, 0.5, 0.2, 0.25]), 2)
        assert ids.tolist() == [1, 3]
        assert probs.tolist() == [0.5, 0.25]

    def test_k_equals_n_on_uniform(self):
        ids, _ = top_k_select(np.full(4, 0.25), 4)
        assert ids.tolist() == [0, 1, 2, 3]

    def test_matches_sort_oracle(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 12))
            k = int(rng.integers(1, n + 1))
            p = rng.random(n)
            p /= p.sum()
            ids, probs = top_k_select(p, k)
            oracle = sorted(range(n), key=lambda i: (-p[i], i))[:k]
            assert ids.tolist() == oracle
            assert np.array_equal(probs, p[ids])

    def test_k_out_of_range(self):
        with pytest.raises(ValidationError):
            top_k_select(np.array([0.5, 0.5]), 0)
        with pytest.raises(ValidationError):
            top_k_select(np.array([0.5, 0.5]), 3)

    @given(
        row=st.lists(st.integers(-20, 20), min_size=3, max_size=10, unique=True),
        scale=st.floats(0.1, 0.9),
    )
    @settings(max_examples=200, deadline=None)
    def test_selected_set_invariant_under_temperature(self, row, scale):
        logits = np.array(row, dtype=np.float64)
        a, _ = top_k_select(softmax_probs(logits[None, :])[0], 2)
        b, _ = top_k_select(softmax_probs(scale * logits[None, :])[0], 2)
        assert a.tolist() == b.tolist()


class TestRouteBatch:
    def test_two_way_tie_single_slot(self):
        sel = selection_from_logits([[0.0, 0.0]], k=1)
        assert sel.expert_ids.tolist() == [[0]]
        assert abs(sel.probs[0, 0] - 0.5) < 1e-12

    def test_one_hot_rows(self):
        rows = np.full((2, 4), -30.0)
        rows[0, 0] = 30.0
        rows[1, 3] = 30.0
        sel = selection_from_logits(rows, k=1)
        assert sel.expert_ids.ravel().tolist() == [0, 3]
        assert np.allclose(sel.probs, 1.0, atol=1e-12)

    def test_identical_rows_identical_selections(self):
        row = [1.0, -0.5, 2.0, 0.0]
        sel = selection_from_logits([row, row, row], k=2)
        assert np.all(sel.expert_ids == sel.expert_ids[0])
        assert np.all(sel.probs == sel.probs[0])

    def test_matches_per_row_functions(self, rng):
        rows = rng.normal(0.0, 2.0, size=(16, 8))
        sel = selection_from_logits(rows, k=3)
        full = softmax_probs(rows)
        for t in range(16):
            ids, probs = top_k_select(full[t], 3)
            assert sel.expert_ids[t].tolist() == ids.tolist()
            assert np.array_equal(sel.probs[t], probs)
        assert np.array_equal(sel.full_probs, full)

    def test_bitwise_deterministic(self, rng):
        rows = rng.normal(0.0, 2.0, size=(8, 6))
        a = selection_from_logits(rows, k=2)
        b = selection_from_logits(rows.copy(), k=2)
        assert np.array_equal(a.expert_ids, b.expert_ids)
        assert np.array_equal(a.probs, b.probs)
        assert np.array_equal(a.full_probs, b.full_probs)

    def test_rejects_bad_logit_shapes(self):
        with pytest.raises(ValidationError):
            RoutingLogits(layer_index=0, phase=Phase.DECODE, values=np.zeros(4))
        with pytest.raises(ValidationError):
            RoutingLogits(layer_index=0, phase=Phase.DECODE, values=np.zeros((0, 4)))
        with pytest.raises(ValidationError):
            RoutingLogits(
                layer_index=0, phase=Phase.DECODE,
                values=np.array([[0.0, np.nan]]),
            )


class TestConfidence:
    def test_peaked_row(self):
        sel = selection_from_logits([[math.log(8.0), 0.0, 0.0]], k=1)
        assert abs(sel.confidence()[0] - 0.8) < 1e-12

    def test_uniform_row(self):
        sel = selection_from_logits([np.zeros(8)], k=2)
        assert abs(sel.confidence()[0] - 0.125) < 1e-12

    def test_margin_metric(self):
        sel = selection_from_logits([[math.log(8.0), math.log(2.0), 0.0]], k=2)
        top1 = sel.confidence(metric="top1")
        margin = sel.confidence(metric="margin")
        assert abs(top1[0] - 8.0 / 11.0) < 1e-12
        assert abs(margin[0] - 6.0 / 11.0) < 1e-12

    def test_free_function_agrees_with_method(self, rng):
        rows = rng.normal(0.0, 2.0, size=(10, 6))
        sel = selection_from_logits(rows, k=2)
        assert np.array_equal(confidence(sel), sel.confidence())
        assert np.array_equal(
            confidence(sel, metric="margin"), sel.confidence(metric="margin")
        )

    def test_monotone_in_top_logit(self):
        vals = []
        for top in (0.5, 1.0, 2.0, 4.0):
            sel = selection_from_logits([[top, 0.0, 0.0, 0.0]], k=1)
            vals.append(sel.confidence()[0])
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_unknown_metric_rejected(self):
        sel = selection_from_logits([[1.0, 0.0]], k=1)
        with pytest.raises(ValidationError):
            sel.confidence(metric="entropy")


class TestSelectionValidation:
    def test_mismatched_arrays_rejected(self):
        with pytest.raises(ValidationError):
            ExpertSelection(
                expert_ids=np.array([[0, 1]]),
                probs=np.array([[0.5]]),
                full_probs=np.array([[0.5, 0.5]]),
            )
