"""Routing math for mixture-of-experts layers.

Converts per-token router logits into probabilities, picks the top-k
experts per token, and scores how concentrated each token's routing
distribution is.  Everything here is deterministic: ties are always
broken toward the smaller expert index, so repeated runs on the same
inputs produce identical selections.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ValidationError


class Phase(Enum):
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass(frozen=True)
class MoEModelSpec:
    """Static shape of an MoE transformer stack."""

    num_layers: int
    num_experts: int
    top_k: int
    d_model: int
    d_ff: int
    bytes_per_param: int = 2

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValidationError("num_layers must be >= 1")
        if self.num_experts < 1:
            raise ValidationError("num_experts must be >= 1")
        if not (1 <= self.top_k <= self.num_experts):
            raise ValidationError(
                f"top_k must be in [1, num_experts]; got {self.top_k} with "
                f"{self.num_experts} experts"
            )
        if self.d_model < 1 or self.d_ff < 1:
            raise ValidationError("d_model and d_ff must be >= 1")
        if self.bytes_per_param < 1:
            raise ValidationError("bytes_per_param must be >= 1")

    @property
    def expert_param_bytes(self) -> int:
        # Two projection matrices per expert MLP.
        return 2 * self.d_model * self.d_ff * self.bytes_per_param


@dataclass(frozen=True)
class RoutingLogits:
    """Raw router outputs for one layer-batch: shape [num_tokens, num_experts]."""

    layer_index: int
    phase: Phase
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError(f"logits must be 2-D, got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ValidationError(f"logits must be non-empty, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("logits contain non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def num_tokens(self) -> int:
        return int(self.values.shape[0])

    @property
    def num_experts(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class ExpertSelection:
    """Top-k routing decision for a batch of tokens.

    expert_ids and probs are [num_tokens, k], ordered by descending
    probability (rank 0 first, ties toward the smaller expert index).
    full_probs is the complete [num_tokens, num_experts] softmax output
    the selection was drawn from.
    """

    expert_ids: np.ndarray
    probs: np.ndarray
    full_probs: np.ndarray

    def __post_init__(self) -> None:
        if self.expert_ids.ndim != 2 or self.full_probs.ndim != 2:
            raise ValidationError("expert_ids and full_probs must be 2-D")
        if self.expert_ids.shape != self.probs.shape:
            raise ValidationError(
                f"expert_ids shape {self.expert_ids.shape} does not match "
                f"probs shape {self.probs.shape}"
            )
        if self.full_probs.shape[0] != self.expert_ids.shape[0]:
            raise ValidationError(
                "full_probs must have one row per routed token"
            )
        if self.expert_ids.shape[1] > self.full_probs.shape[1]:
            raise ValidationError("more selection slots than experts")

    @property
    def num_tokens(self) -> int:
        return int(self.expert_ids.shape[0])

    @property
    def top_k(self) -> int:
        return int(self.expert_ids.shape[1])

    @property
    def num_experts(self) -> int:
        return int(self.full_probs.shape[1])

    def confidence(self, metric: str = "top1") -> np.ndarray:
        """Per-token routing confidence.

        "top1" is the rank-0 softmax probability.  "margin" is the gap
        between the two largest probabilities of the full distribution.
        """
        if metric == "top1":
            return self.full_probs.max(axis=1)
        if metric == "margin":
            if self.num_experts == 1:
                return self.full_probs[:, 0].copy()
            part = np.sort(self.full_probs, axis=1)
            return part[:, -1] - part[:, -2]
        raise ValidationError(f"unknown confidence metric {metric!r}")


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis.

    Subtracts the row max before exponentiating; accumulation happens in
    float64.  Rejects non-finite inputs rather than propagating NaNs.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValidationError("softmax input is empty")
    if not np.all(np.isfinite(z)):
        raise ValidationError("softmax input contains non-finite values")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def top_k_select(probs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and probabilities of the k largest entries, descending.

    Ties break toward the smaller index, which keeps the selection
    deterministic under permutation-stable inputs.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValidationError("top_k_select expects a 1-D probability vector")
    if not (1 <= k <= p.shape[0]):
        raise ValidationError(f"k must be in [1, {p.shape[0]}], got {k}")
    # Stable sort on negated probabilities preserves ascending index order
    # among equal entries.
    order = np.argsort(-p, kind="stable")[:k]
    return order.astype(np.int64), p[order]


def route_batch(logits: RoutingLogits, k: int) -> ExpertSelection:
    """Softmax + top-k for every token of a layer-batch."""
    if not (1 <= k <= logits.num_experts):
        raise ValidationError(
            f"k must be in [1, {logits.num_experts}], got {k}"
        )
    full = softmax_probs(logits.values)
    order = np.argsort(-full, axis=1, kind="stable")[:, :k]
    sel_probs = np.take_along_axis(full, order, axis=1)
    return ExpertSelection(
        expert_ids=order.astype(np.int64),
        probs=sel_probs,
        full_probs=full,
    )


def confidence(selection: ExpertSelection, metric: str = "top1") -> np.ndarray:
    """Free-function alias for ExpertSelection.confidence."""
    return selection.confidence(metric)
