"""Synthetic routing workloads for skew studies.

Generates traces straight from the router on synthetic logits, without
running the full simulator: an i.i.d. workload where every batch draws
from the same distribution, and a clustered workload where each batch
favors its own small set of hot experts (topic-skewed batches).
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .router import ExpertSelection, Phase, RoutingLogits, route_batch
from .policy import full_retain_mask
from .trace import TraceRecord, records_from_event


def _selection_records(
    selection: ExpertSelection, run_id: str, batch_id: int, layer: int
) -> list[TraceRecord]:
    mask = full_retain_mask(selection, layer, Phase.DECODE)
    return records_from_event(run_id, batch_id, layer, Phase.DECODE, selection, mask)


def iid_trace(
    num_batches: int,
    batch_size: int,
    num_experts: int,
    top_k: int,
    seed: int = 0,
    logit_scale: float = 1.0,
    run_id: str = "iid",
) -> list[TraceRecord]:
    """Batches that all draw token logits from one shared distribution."""
    if num_batches < 1 or batch_size < 1:
        raise ValidationError("num_batches and batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    records = []
    for b in range(num_batches):
        logits = rng.normal(0.0, logit_scale, size=(batch_size, num_experts))
        sel = route_batch(RoutingLogits(0, Phase.DECODE, logits), top_k)
        records.extend(_selection_records(sel, run_id, b, 0))
    return records


def clustered_trace(
    num_batches: int,
    batch_size: int,
    num_experts: int,
    top_k: int,
    seed: int = 0,
    hot_experts: int = 2,
    boost: float = 2.0,
    run_id: str = "clustered",
) -> list[TraceRecord]:
    """Batches with per-batch hot experts: uniform overall, skewed within.

    Each batch boosts the logits of its own hot-expert set for every
    token, so batch composition concentrates.  Hot sets are dealt from a
    reshuffled deck of expert ids, which keeps every expert hot equally
    often and the long-run aggregate near uniform.
    """
    if not (1 <= hot_experts <= num_experts):
        raise ValidationError("hot_experts must be in [1, num_experts]")
    rng = np.random.default_rng(seed)
    records = []
    deck: list[int] = []
    for b in range(num_batches):
        if len(deck) < hot_experts:
            deck = list(rng.permutation(num_experts))
        hot = np.array([deck.pop() for _ in range(hot_experts)])
        logits = rng.normal(0.0, 1.0, size=(batch_size, num_experts))
        logits[:, hot] += boost
        sel = route_batch(RoutingLogits(0, Phase.DECODE, logits), top_k)
        records.extend(_selection_records(sel, run_id, b, 0))
    return records
