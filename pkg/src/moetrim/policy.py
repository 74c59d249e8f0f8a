"""Batch-level expert retention policies.

Two decode-time policies shrink the set of experts a batch touches:

* latency policy: vote over the batch's top-k choices and drop a fixed
  number of the least-used experts.
* accuracy policy: look only at high-confidence tokens, keep the experts
  they use most, and always preserve their first choices.

Both leave prefill untouched and remap every token onto the retained
set with gate weights renormalized from the full routing distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .router import ExpertSelection, Phase

POLICY_MODES = ("latency", "accuracy")


@dataclass(frozen=True)
class PolicyConfig:
    mode: str = "latency"
    drop_count: int = 0
    confidence_threshold: float = 0.5
    sample_threshold: int = 8
    min_experts: int | None = None  # resolved to top_k when unset
    freq_keep_budget: int = 4
    confidence_metric: str = "top1"
    # Optional per-rank vote weights; None means every (token, rank) pair
    # counts equally.
    vote_rank_weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.mode not in POLICY_MODES:
            raise ValidationError(f"mode must be one of {POLICY_MODES}, got {self.mode!r}")
        if self.drop_count < 0:
            raise ValidationError("drop_count must be >= 0")
        if not (0.0 <= self.confidence_threshold <= 1.0):
            raise ValidationError("confidence_threshold must be in [0, 1]")
        if self.sample_threshold < 1:
            raise ValidationError("sample_threshold must be >= 1")
        if self.min_experts is not None and self.min_experts < 1:
            raise ValidationError("min_experts must be >= 1 when given")
        if self.freq_keep_budget < 1:
            raise ValidationError("freq_keep_budget must be >= 1")
        if self.vote_rank_weights is not None and any(
            w < 0 for w in self.vote_rank_weights
        ):
            raise ValidationError("vote_rank_weights must be nonnegative")

    def resolved_min_experts(self, top_k: int) -> int:
        """Floor on retained experts; never below the routing width."""
        if self.min_experts is None:
            return top_k
        if self.min_experts < top_k:
            raise ValidationError(
                f"min_experts ({self.min_experts}) must be >= top_k ({top_k})"
            )
        return self.min_experts


@dataclass(frozen=True)
class VoteTally:
    """Per-expert vote counts over a batch's selections."""

    counts: np.ndarray

    @property
    def num_experts(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> float:
        return float(self.counts.sum())


@dataclass(frozen=True)
class ExpertMask:
    """A policy decision for one layer-batch.

    retained lists the surviving expert ids (sorted ascending).  The
    remap_* arrays are [num_tokens, k]: each token keeps exactly k slots,
    every slot carrying its original expert, the expert actually
    assigned, and the renormalized gate weight.  clipped flags a run
    where the requested reduction was limited by the min-experts floor.
    """

    layer_index: int
    phase: Phase
    retained: np.ndarray
    remap_original: np.ndarray
    remap_assigned: np.ndarray
    remap_weights: np.ndarray
    clipped: bool = False
    important_tokens: np.ndarray | None = None

    @property
    def num_retained(self) -> int:
        return int(self.retained.shape[0])

    @property
    def num_tokens(self) -> int:
        return int(self.remap_original.shape[0])

    def displacement_count(self) -> int:
        """Number of token slots whose assigned expert differs from the original."""
        return int((self.remap_assigned != self.remap_original).sum())


def vote_expert_frequencies(
    selection: ExpertSelection,
    rank_weights: tuple[float, ...] | None = None,
) -> VoteTally:
    """Tally how often each expert appears across the batch's top-k slots.

    Every (token, rank) pair contributes one vote by default; with
    rank_weights given, rank r votes count rank_weights[r] instead.
    """
    n_experts = selection.num_experts
    ids = selection.expert_ids
    if rank_weights is None:
        counts = np.bincount(ids.ravel(), minlength=n_experts).astype(np.float64)
    else:
        if len(rank_weights) != selection.top_k:
            raise ValidationError(
                f"rank_weights must have length top_k={selection.top_k}"
            )
        w = np.broadcast_to(
            np.asarray(rank_weights, dtype=np.float64), ids.shape
        ).ravel()
        counts = np.bincount(ids.ravel(), weights=w, minlength=n_experts)
    return VoteTally(counts=counts)


def _retention_order(counts: np.ndarray) -> np.ndarray:
    """Expert ids ordered best-to-worst for retention.

    Primary key: higher vote count.  Ties: smaller expert index, which is
    the same as dropping the larger index first.
    """
    n = counts.shape[0]
    return np.lexsort((np.arange(n), -counts))


def remap_tokens(
    selection: ExpertSelection, retained: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reassign every token's k slots onto the retained expert set.

    A slot keeps its original expert when retained; otherwise it takes
    the highest-probability retained expert not already occupying one of
    the token's slots.  When fewer than k experts survive, leftover slots
    collapse onto the best retained expert and share its weight.  Slot
    weights are the token's full probabilities restricted to the
    assigned experts, renormalized to sum to one per token.
    """
    retained = np.asarray(sorted(set(int(e) for e in np.asarray(retained).ravel())))
    if retained.size == 0:
        raise ValidationError("retained set must be non-empty")
    if retained.min() < 0 or retained.max() >= selection.num_experts:
        raise ValidationError("retained contains out-of-range expert ids")

    n, k = selection.expert_ids.shape
    retained_set = set(int(e) for e in retained)
    original = selection.expert_ids.copy()
    assigned = np.empty_like(original)
    weights = np.empty_like(selection.probs)

    for t in range(n):
        probs_t = selection.full_probs[t]
        # Retained candidates ordered by descending probability, ties
        # toward the smaller expert index.
        cand_order = [
            int(e) for e in np.lexsort((retained, -probs_t[retained]))
        ]
        candidates = [int(retained[i]) for i in cand_order]
        occupied: set[int] = {
            int(e) for e in original[t] if int(e) in retained_set
        }
        row = np.empty(k, dtype=np.int64)
        for r in range(k):
            orig = int(original[t, r])
            if orig in retained_set:
                row[r] = orig
                continue
            pick = None
            for c in candidates:
                if c not in occupied:
                    pick = c
                    break
            if pick is None:
                # Retained set smaller than k: collapse onto the best
                # retained expert for this token.
                pick = candidates[0]
            row[r] = pick
            occupied.add(pick)
        assigned[t] = row
        slot_p = probs_t[row]
        total = slot_p.sum()
        if total <= 0.0:
            raise ValidationError(
                "token has zero probability mass on the assigned experts"
            )
        weights[t] = slot_p / total

    return original, assigned, weights


def full_retain_mask(
    selection: ExpertSelection, layer_index: int, phase: Phase
) -> ExpertMask:
    """Identity mask: every expert retained, weights renormalized top-k probs."""
    original = selection.expert_ids.copy()
    weights = selection.probs / selection.probs.sum(axis=1, keepdims=True)
    return ExpertMask(
        layer_index=layer_index,
        phase=phase,
        retained=np.arange(selection.num_experts, dtype=np.int64),
        remap_original=original,
        remap_assigned=original.copy(),
        remap_weights=weights,
        clipped=False,
    )


def latency_policy(
    selection: ExpertSelection,
    phase: Phase,
    config: PolicyConfig,
    layer_index: int = 0,
) -> ExpertMask:
    """Drop a fixed number of the batch's least-voted experts.

    Prefill batches are returned untouched.  For decode, the drop count
    is clipped so at least min_experts survive; a clipped run is flagged
    rather than rejected.
    """
    if phase is Phase.PREFILL:
        return full_retain_mask(selection, layer_index, phase)

    n_experts = selection.num_experts
    min_keep = config.resolved_min_experts(selection.top_k)
    tally = vote_expert_frequencies(selection, config.vote_rank_weights)
    effective_drop = min(config.drop_count, max(0, n_experts - min_keep))
    clipped = effective_drop != config.drop_count

    order = _retention_order(tally.counts)
    retained = np.sort(order[: n_experts - effective_drop])
    original, assigned, weights = remap_tokens(selection, retained)
    return ExpertMask(
        layer_index=layer_index,
        phase=phase,
        retained=retained.astype(np.int64),
        remap_original=original,
        remap_assigned=assigned,
        remap_weights=weights,
        clipped=clipped,
    )


def select_important_tokens(
    selection: ExpertSelection, config: PolicyConfig
) -> np.ndarray:
    """Token indices whose routing confidence clears the threshold.

    When more than sample_threshold tokens qualify, only the
    sample_threshold most confident are kept (ties toward the lower
    token index).  The result is never empty: with no qualifying token,
    the single most confident one is returned.
    """
    conf = selection.confidence(config.confidence_metric)
    qualifying = np.flatnonzero(conf >= config.confidence_threshold)
    if qualifying.size == 0:
        return np.array([int(np.argmax(conf))], dtype=np.int64)
    if qualifying.size > config.sample_threshold:
        order = np.argsort(-conf[qualifying], kind="stable")
        qualifying = qualifying[order[: config.sample_threshold]]
    return np.sort(qualifying).astype(np.int64)


def accuracy_policy(
    selection: ExpertSelection,
    phase: Phase,
    config: PolicyConfig,
    layer_index: int = 0,
) -> ExpertMask:
    """Keep the experts that matter to the batch's confident tokens.

    Decode path: tally votes over the important tokens only, retain the
    freq_keep_budget most frequent, force-add every important token's
    rank-0 expert, pad with the next most frequent up to the min-experts
    floor, then remap the whole batch.
    """
    if phase is Phase.PREFILL:
        return full_retain_mask(selection, layer_index, phase)

    min_keep = config.resolved_min_experts(selection.top_k)
    important = select_important_tokens(selection, config)

    sub = ExpertSelection(
        expert_ids=selection.expert_ids[important],
        probs=selection.probs[important],
        full_probs=selection.full_probs[important],
    )
    tally = vote_expert_frequencies(sub, config.vote_rank_weights)
    order = _retention_order(tally.counts)
    voted = [int(e) for e in order if tally.counts[int(e)] > 0]

    budget = min(config.freq_keep_budget, selection.num_experts)
    retained_set = set(voted[:budget])
    retained_set.update(int(e) for e in sub.expert_ids[:, 0])

    padded = False
    for e in order:
        if len(retained_set) >= min_keep:
            break
        if int(e) not in retained_set:
            retained_set.add(int(e))
            padded = True

    retained = np.array(sorted(retained_set), dtype=np.int64)
    original, assigned, weights = remap_tokens(selection, retained)
    return ExpertMask(
        layer_index=layer_index,
        phase=phase,
        retained=retained,
        remap_original=original,
        remap_assigned=assigned,
        remap_weights=weights,
        clipped=padded,
        important_tokens=important,
    )


def apply_policy(
    selection: ExpertSelection,
    phase: Phase,
    config: PolicyConfig,
    layer_index: int = 0,
) -> ExpertMask:
    """Dispatch to the configured policy."""
    if config.mode == "latency":
        return latency_policy(selection, phase, config, layer_index)
    return accuracy_policy(selection, phase, config, layer_index)
