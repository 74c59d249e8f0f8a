"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from moetrim.router import MoEModelSpec, Phase, RoutingLogits, route_batch


def selection_from_logits(rows, k, phase=Phase.DECODE, layer=0):
    values = np.asarray(rows, dtype=np.float64)
    return route_batch(RoutingLogits(layer_index=layer, phase=phase, values=values), k)


def selection_from_ids(ids, num_experts, phase=Phase.DECODE):
    """Selection whose per-token ids equal the given rows, in rank order.

    Chosen slots get well-separated logits so the construction has no
    ties and the router reproduces the rows exactly.
    """
    ids = np.asarray(ids, dtype=np.int64)
    n, k = ids.shape
    rows = np.zeros((n, num_experts))
    for t in range(n):
        for r in range(k):
            rows[t, ids[t, r]] = 2.0 * (k - r)
    sel = selection_from_logits(rows, k, phase=phase)
    assert np.array_equal(sel.expert_ids, ids), "builder failed to hit target ids"
    return sel


def random_selection(rng, n_tokens, num_experts, k, scale=2.0, phase=Phase.DECODE):
    rows = rng.normal(0.0, scale, size=(n_tokens, num_experts))
    return selection_from_logits(rows, k, phase=phase)


def small_spec(**kw):
    base = dict(num_layers=2, num_experts=4, top_k=2, d_model=8, d_ff=16,
                bytes_per_param=2)
    base.update(kw)
    return MoEModelSpec(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
