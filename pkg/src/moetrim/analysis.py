"""Offline analytics over persisted routing traces.

Answers three questions about a run: how often each expert fired
overall, how much batch-to-batch composition varied around that
aggregate, and how far the retention policy actually shrank and
remapped the expert pool.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .trace import MaskRecord, TraceRecord


@dataclass(frozen=True)
class ActivationStats:
    aggregate_freq: np.ndarray   # [N], sums to 1
    per_batch_freq: np.ndarray   # [num_batches, N], rows sum to 1
    batch_ids: tuple[int, ...]
    batch_tokens: np.ndarray     # token-slot count per batch
    aggregate_std: float         # dispersion of the aggregate across experts
    per_batch_std: np.ndarray    # [N], per-expert std across batches
    skew_ratio: float            # max(per_batch_std) / aggregate_std


@dataclass(frozen=True)
class LayerReduction:
    layer: int
    mean_retained: float
    min_retained: int
    max_retained: int
    clipped_events: int


@dataclass(frozen=True)
class ReductionSummary:
    per_layer: tuple[LayerReduction, ...]
    mean_retained: float
    remap_rate: float            # fraction of slots with assigned != original
    important_fraction: float | None  # mean share of tokens driving retention


def _infer_num_experts(records: list[TraceRecord], num_experts: int | None) -> int:
    if num_experts is not None:
        if num_experts < 1:
            raise ValidationError("num_experts must be >= 1")
        return num_experts
    top = max(max(r.expert_original, r.expert_assigned) for r in records)
    return top + 1


def aggregate_frequencies(
    records: list[TraceRecord],
    num_experts: int | None = None,
    use_assigned: bool = False,
) -> np.ndarray:
    """Expert activation frequencies over all token slots of a trace.

    Counts router choices (expert_original) by default; flip
    use_assigned to measure the post-policy assignment instead.  The
    denominator is the number of (token, rank) slots, so frequencies sum
    to one.
    """
    if not records:
        raise ValidationError("trace is empty")
    n = _infer_num_experts(records, num_experts)
    field = "expert_assigned" if use_assigned else "expert_original"
    ids = np.array([getattr(r, field) for r in records])
    if ids.max() >= n:
        raise ValidationError("expert id exceeds num_experts")
    counts = np.bincount(ids, minlength=n).astype(np.float64)
    return counts / counts.sum()


def batch_skew_report(
    records: list[TraceRecord],
    num_experts: int | None = None,
    use_assigned: bool = False,
    layer: int | None = None,
) -> ActivationStats:
    """Aggregate-vs-per-batch activation dispersion.

    Groups slots by batch event (optionally restricted to one layer),
    computes each batch's expert frequency vector, and compares the
    spread of per-batch frequencies against the spread of the pooled
    aggregate.  Needs at least two batches.
    """
    if not records:
        raise ValidationError("trace is empty")
    if layer is not None:
        records = [r for r in records if r.layer == layer]
        if not records:
            raise ValidationError(f"trace has no records for layer {layer}")
    n = _infer_num_experts(records, num_experts)
    field = "expert_assigned" if use_assigned else "expert_original"

    by_batch: dict[int, list[int]] = defaultdict(list)
    for r in records:
        by_batch[r.batch_id].append(getattr(r, field))
    batch_ids = tuple(sorted(by_batch))
    if len(batch_ids) < 2:
        raise ValidationError("batch skew needs at least two batch events")

    per_batch = np.zeros((len(batch_ids), n))
    tokens = np.zeros(len(batch_ids))
    for i, b in enumerate(batch_ids):
        ids = np.array(by_batch[b])
        if ids.max() >= n:
            raise ValidationError("expert id exceeds num_experts")
        counts = np.bincount(ids, minlength=n).astype(np.float64)
        per_batch[i] = counts / counts.sum()
        tokens[i] = counts.sum()

    aggregate = (per_batch * tokens[:, None]).sum(axis=0) / tokens.sum()
    aggregate_std = float(aggregate.std())
    per_batch_std = per_batch.std(axis=0)
    skew = float(per_batch_std.max() / aggregate_std) if aggregate_std > 0 else float("inf")
    return ActivationStats(
        aggregate_freq=aggregate,
        per_batch_freq=per_batch,
        batch_ids=batch_ids,
        batch_tokens=tokens,
        aggregate_std=aggregate_std,
        per_batch_std=per_batch_std,
        skew_ratio=skew,
    )


def reduction_summary(
    records: list[TraceRecord],
    masks: list[MaskRecord] | None = None,
) -> ReductionSummary:
    """Retention and remap statistics for a policy run.

    Retained-pool sizes come from mask records (decode events only);
    when no masks are available the distinct assigned experts per event
    serve as a lower-bound fallback.  The remap rate counts displaced
    token slots across decode records.
    """
    if not records:
        raise ValidationError("trace is empty")
    decode_records = [r for r in records if r.phase == "decode"]
    if decode_records:
        displaced = sum(
            1 for r in decode_records if r.expert_assigned != r.expert_original
        )
        remap_rate = displaced / len(decode_records)
    else:
        remap_rate = 0.0

    per_layer: dict[int, list[tuple[int, bool]]] = defaultdict(list)
    important: list[float] = []
    if masks:
        for m in masks:
            if m.phase != "decode":
                continue
            per_layer[m.layer].append((len(m.retained), m.clipped))
            if m.num_important is not None and m.num_tokens > 0:
                important.append(m.num_important / m.num_tokens)
    else:
        seen: dict[tuple[int, int], set[int]] = defaultdict(set)
        for r in decode_records:
            seen[(r.layer, r.batch_id)].add(r.expert_assigned)
        for (layer, _batch), experts in seen.items():
            per_layer[layer].append((len(experts), False))

    layers = []
    all_counts = []
    for layer in sorted(per_layer):
        counts = [c for c, _ in per_layer[layer]]
        clipped = sum(1 for _, c in per_layer[layer] if c)
        layers.append(
            LayerReduction(
                layer=layer,
                mean_retained=float(np.mean(counts)),
                min_retained=int(min(counts)),
                max_retained=int(max(counts)),
                clipped_events=clipped,
            )
        )
        all_counts.extend(counts)

    return ReductionSummary(
        per_layer=tuple(layers),
        mean_retained=float(np.mean(all_counts)) if all_counts else float("nan"),
        remap_rate=remap_rate,
        important_fraction=float(np.mean(important)) if important else None,
    )
