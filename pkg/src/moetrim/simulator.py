"""Seeded synthetic MoE transformer for routing interventions.

A small dense stack (single-head attention stand-in + top-k expert MLPs
with residual connections) whose weights come from a seeded generator.
It is not trained; it exists so that routing interventions (denying an
expert preference, remapping onto a reduced expert set, masking layers)
can be compared against an identical baseline run, with hidden-state
divergence as the accuracy proxy.  Same seed, same inputs, same
intervention: bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ValidationError
from .policy import ExpertMask, PolicyConfig, apply_policy, full_retain_mask
from .router import ExpertSelection, MoEModelSpec, Phase, RoutingLogits, route_batch

_EPS = 1e-12


def rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + _EPS)


@dataclass(frozen=True)
class SyntheticMoE:
    spec: MoEModelSpec
    seed: int
    d_head: int
    router_w: np.ndarray  # [L, d_model, N]
    wq: np.ndarray        # [L, d_model, d_head]
    wk: np.ndarray        # [L, d_model, d_head]
    wv: np.ndarray        # [L, d_model, d_head]
    wo: np.ndarray        # [L, d_head, d_model]
    w1: np.ndarray        # [L, N, d_model, d_ff]
    w2: np.ndarray        # [L, N, d_ff, d_model]


def build_model(
    spec: MoEModelSpec,
    seed: int,
    d_head: int = 16,
    router_gain: float = 2.0,
    attn_gain: float = 1.5,
    expert_gain: float = 1.0,
) -> SyntheticMoE:
    """Sample deterministic weights, scaled to keep hidden norms bounded."""
    rng = np.random.default_rng(seed)
    L, N = spec.num_layers, spec.num_experts
    dm, dff = spec.d_model, spec.d_ff

    def normal(shape: tuple[int, ...], std: float) -> np.ndarray:
        return rng.normal(0.0, std, size=shape)

    # Output projections are damped with depth so the residual stream
    # grows slowly (variance-preserving stacking).
    out_damp = 1.0 / np.sqrt(2.0 * L)
    return SyntheticMoE(
        spec=spec,
        seed=seed,
        d_head=d_head,
        router_w=normal((L, dm, N), router_gain / np.sqrt(dm)),
        wq=normal((L, dm, d_head), 1.0 / np.sqrt(dm)),
        wk=normal((L, dm, d_head), 1.0 / np.sqrt(dm)),
        wv=normal((L, dm, d_head), 1.0 / np.sqrt(dm)),
        wo=normal((L, d_head, dm), attn_gain * out_damp / np.sqrt(d_head)),
        w1=normal((L, N, dm, dff), 1.0 / np.sqrt(dm)),
        w2=normal((L, N, dff, dm), expert_gain * out_damp / np.sqrt(dff)),
    )


def expert_mlp(model: SyntheticMoE, layer: int, expert: int, x: np.ndarray) -> np.ndarray:
    """Two-matrix expert MLP with an elementwise nonlinearity."""
    return np.tanh(x @ model.w1[layer, expert]) @ model.w2[layer, expert]


def router_logits(model: SyntheticMoE, layer: int, hidden: np.ndarray) -> np.ndarray:
    return rms_norm(hidden) @ model.router_w[layer]


def forward_layer(
    hidden: np.ndarray,
    model: SyntheticMoE,
    layer_index: int,
    mask: ExpertMask,
) -> np.ndarray:
    """MoE sublayer: residual plus the weighted sum of assigned expert MLPs.

    The mask decides which expert serves each token slot and with what
    gate weight; this function never re-routes.
    """
    if hidden.shape[0] != mask.num_tokens:
        raise ValidationError(
            f"mask covers {mask.num_tokens} tokens but hidden has {hidden.shape[0]}"
        )
    out = hidden.copy()
    assigned = mask.remap_assigned
    weights = mask.remap_weights
    for e in np.unique(assigned):
        slot_rows, slot_cols = np.nonzero(assigned == e)
        rows = np.unique(slot_rows)
        mlp_out = expert_mlp(model, layer_index, int(e), hidden[rows])
        row_pos = {int(r): i for i, r in enumerate(rows)}
        w_per_row = np.zeros(rows.shape[0])
        for r, c in zip(slot_rows, slot_cols):
            w_per_row[row_pos[int(r)]] += weights[r, c]
        out[rows] += w_per_row[:, None] * mlp_out
    return out


@dataclass(frozen=True)
class Intervention:
    """What to perturb during a simulated run.

    kind "deny_rank" strips each affected token's rank-th expert
    preference; kind "policy" replaces selections with the configured
    retention policy's remap; "none" leaves routing alone.  layers=None
    means all layers.  token_mode optionally restricts the perturbation
    to the token_count most or least confident tokens of each routing
    event.  decode_step_limit applies the perturbation only to the first
    so-many decode steps.
    """

    kind: str = "none"
    rank: int = 0
    layers: frozenset[int] | None = None
    phases: frozenset[Phase] = frozenset({Phase.PREFILL, Phase.DECODE})
    token_mode: str | None = None
    token_count: int = 0
    token_threshold: float = 0.5
    decode_step_limit: int | None = None
    policy: PolicyConfig | None = None

    _TOKEN_MODES = (
        "top_confidence", "bottom_confidence",
        "above_threshold", "below_threshold",
    )

    def __post_init__(self) -> None:
        if self.kind not in ("none", "deny_rank", "policy"):
            raise ValidationError(f"unknown intervention kind {self.kind!r}")
        if self.kind == "policy" and self.policy is None:
            raise ValidationError("policy intervention requires a PolicyConfig")
        if self.token_mode is not None and self.token_mode not in self._TOKEN_MODES:
            raise ValidationError(f"unknown token_mode {self.token_mode!r}")

    def active_for(self, layer: int, phase: Phase, decode_step: int | None) -> bool:
        if self.kind == "none":
            return False
        if phase not in self.phases:
            return False
        if self.layers is not None and layer not in self.layers:
            return False
        if (
            phase is Phase.DECODE
            and self.decode_step_limit is not None
            and decode_step is not None
            and decode_step >= self.decode_step_limit
        ):
            return False
        return True

    def pick_tokens(self, selection: ExpertSelection) -> np.ndarray | None:
        """Token indices to perturb, or None for the whole batch."""
        if self.token_mode is None:
            return None
        conf = selection.confidence()
        if self.token_mode == "above_threshold":
            return np.flatnonzero(conf >= self.token_threshold).astype(np.int64)
        if self.token_mode == "below_threshold":
            return np.flatnonzero(conf < self.token_threshold).astype(np.int64)
        m = min(self.token_count, conf.shape[0])
        order = np.argsort(-conf if self.token_mode == "top_confidence" else conf,
                           kind="stable")
        return np.sort(order[:m]).astype(np.int64)


def deny_expert_rank(
    selection: ExpertSelection,
    rank: int,
    tokens: np.ndarray | None = None,
) -> ExpertSelection:
    """Replace each token's rank-th choice with its best unselected expert.

    Slots are re-sorted by descending probability afterwards so rank
    semantics stay meaningful.  Requires top_k < num_experts, otherwise
    no replacement exists.
    """
    n, k = selection.expert_ids.shape
    if not (0 <= rank < k):
        raise ValidationError(f"rank must be in [0, {k}), got {rank}")
    if k >= selection.num_experts:
        raise ValidationError("denial needs at least one unselected expert")
    token_list = range(n) if tokens is None else [int(t) for t in tokens]

    ids = selection.expert_ids.copy()
    for t in token_list:
        chosen = set(int(e) for e in ids[t])
        probs_t = selection.full_probs[t]
        order = np.lexsort((np.arange(probs_t.shape[0]), -probs_t))
        replacement = next(int(e) for e in order if int(e) not in chosen)
        ids[t, rank] = replacement
        slot_probs = probs_t[ids[t]]
        resort = np.lexsort((ids[t], -slot_probs))
        ids[t] = ids[t][resort]
    probs = np.take_along_axis(selection.full_probs, ids, axis=1)
    return ExpertSelection(expert_ids=ids, probs=probs, full_probs=selection.full_probs)


def layer_mask_schedule(num_layers: int, window: int) -> list[Intervention]:
    """Sliding-window schedule: deny rank 0 everywhere except the window.

    Produces num_layers - window + 1 interventions; the config whose
    window covers all layers perturbs nothing.
    """
    if not (1 <= window <= num_layers):
        raise ValidationError(
            f"window must be in [1, {num_layers}], got {window}"
        )
    schedule = []
    for start in range(num_layers - window + 1):
        preserved = set(range(start, start + window))
        denied = frozenset(l for l in range(num_layers) if l not in preserved)
        schedule.append(Intervention(kind="deny_rank", rank=0, layers=denied))
    return schedule


TraceSink = Callable[
    [int, int, Phase, ExpertSelection, ExpertMask], None
]  # (batch_event, layer, phase, selection, mask)


@dataclass
class SimResult:
    hidden: np.ndarray  # [B, P + D, d_model] final-layer states per position
    prefill_len: int
    decode_steps: int


def _apply_routing(
    model: SyntheticMoE,
    layer: int,
    phase: Phase,
    hidden_flat: np.ndarray,
    intervention: Intervention | None,
    decode_step: int | None,
    top_k: int,
) -> tuple[ExpertSelection, ExpertMask]:
    logits = RoutingLogits(
        layer_index=layer, phase=phase, values=router_logits(model, layer, hidden_flat)
    )
    selection = route_batch(logits, top_k)
    if intervention is None or not intervention.active_for(layer, phase, decode_step):
        return selection, full_retain_mask(selection, layer, phase)
    if intervention.kind == "deny_rank":
        tokens = intervention.pick_tokens(selection)
        denied = deny_expert_rank(selection, intervention.rank, tokens)
        return selection, full_retain_mask(denied, layer, phase)
    # Policy intervention: the mask carries the retained set and remap.
    mask = apply_policy(selection, phase, intervention.policy, layer)
    return selection, mask


def simulate(
    model: SyntheticMoE,
    inputs: np.ndarray,
    decode_steps: int,
    intervention: Intervention | None = None,
    trace_sink: TraceSink | None = None,
    batch_event_start: int = 0,
) -> SimResult:
    """Run prefill over the given positions, then autoregressive decode.

    inputs is [batch, prefill_len, d_model].  Decode feeds each step the
    normalized final-layer state of the previous position (greedy
    next-state generation; no sampling).  Routing happens per layer over
    the flattened batch: prefill routes all batch*prefill_len tokens in
    one event, each decode step routes one token per sequence.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 3:
        raise ValidationError("inputs must be [batch, prefill_len, d_model]")
    B, P, dm = x.shape
    if dm != model.spec.d_model:
        raise ValidationError(
            f"inputs have d_model={dm}, model expects {model.spec.d_model}"
        )
    if P < 1:
        raise ValidationError("prefill_len must be >= 1")
    if decode_steps < 0:
        raise ValidationError("decode_steps must be >= 0")

    L = model.spec.num_layers
    k = model.spec.top_k
    scale = 1.0 / np.sqrt(model.d_head)
    event = batch_event_start

    # Per-layer key/value caches over all processed positions.
    keys = [np.zeros((B, 0, model.d_head)) for _ in range(L)]
    vals = [np.zeros((B, 0, model.d_head)) for _ in range(L)]
    final_hidden = np.zeros((B, P + decode_steps, dm))

    def attention(layer: int, h: np.ndarray, causal_offset: int) -> np.ndarray:
        # h: [B, T, d_model]; attends over cache plus the new positions.
        xn = rms_norm(h)
        q = xn @ model.wq[layer]
        k_new = xn @ model.wk[layer]
        v_new = xn @ model.wv[layer]
        keys[layer] = np.concatenate([keys[layer], k_new], axis=1)
        vals[layer] = np.concatenate([vals[layer], v_new], axis=1)
        scores = np.einsum("bth,bsh->bts", q, keys[layer]) * scale
        total = keys[layer].shape[1]
        t_new = h.shape[1]
        # Position i of this chunk may attend up to absolute position
        # causal_offset + i.
        pos_new = causal_offset + np.arange(t_new)
        allowed = np.arange(total)[None, :] <= pos_new[:, None]
        scores = np.where(allowed[None, :, :], scores, -np.inf)
        attn = np.exp(scores - scores.max(axis=-1, keepdims=True))
        attn = attn / attn.sum(axis=-1, keepdims=True)
        ctx = np.einsum("bts,bsh->bth", attn, vals[layer])
        return ctx @ model.wo[layer]

    def run_chunk(
        h: np.ndarray, phase: Phase, causal_offset: int, decode_step: int | None
    ) -> np.ndarray:
        # One chunk is one routing event group (a prefill pass or one
        # decode step); all its layers share a batch event id.
        nonlocal event
        B_, T_, _ = h.shape
        for layer in range(L):
            h = h + attention(layer, h, causal_offset)
            flat = h.reshape(B_ * T_, dm)
            selection, mask = _apply_routing(
                model, layer, phase, flat, intervention, decode_step, k
            )
            if trace_sink is not None:
                trace_sink(event, layer, phase, selection, mask)
            flat = forward_layer(flat, model, layer, mask)
            h = flat.reshape(B_, T_, dm)
        event += 1
        return h

    h = run_chunk(x, Phase.PREFILL, 0, None)
    final_hidden[:, :P] = h

    prev = h[:, -1]
    for step in range(decode_steps):
        nxt = rms_norm(prev)[:, None, :]
        h_step = run_chunk(nxt, Phase.DECODE, P + step, step)
        final_hidden[:, P + step] = h_step[:, 0]
        prev = h_step[:, 0]

    return SimResult(hidden=final_hidden, prefill_len=P, decode_steps=decode_steps)


@dataclass(frozen=True)
class DivergenceReport:
    """How far an intervened run drifted from its baseline."""

    per_token_l2: np.ndarray      # [B, P + D]
    per_token_cosine: np.ndarray  # [B, P + D]
    prefill_len: int
    mean_l2: float
    mean_cosine: float
    prefill_mean_l2: float
    decode_mean_l2: float
    final_step_l2: float
    final_step_cosine: float

    def position_mean_l2(self, positions: np.ndarray) -> float:
        return float(self.per_token_l2[:, positions].mean())


def divergence_report(base: SimResult, other: SimResult) -> DivergenceReport:
    if base.hidden.shape != other.hidden.shape:
        raise ValidationError("divergence requires runs of identical shape")
    diff = base.hidden - other.hidden
    l2 = np.sqrt(np.sum(np.square(diff), axis=-1))
    na = np.sqrt(np.sum(np.square(base.hidden), axis=-1))
    nb = np.sqrt(np.sum(np.square(other.hidden), axis=-1))
    denom = np.maximum(na * nb, _EPS)
    cos = np.sum(base.hidden * other.hidden, axis=-1) / denom
    P = base.prefill_len
    decode = l2[:, P:] if base.decode_steps else np.zeros((l2.shape[0], 0))
    return DivergenceReport(
        per_token_l2=l2,
        per_token_cosine=cos,
        prefill_len=P,
        mean_l2=float(l2.mean()),
        mean_cosine=float(cos.mean()),
        prefill_mean_l2=float(l2[:, :P].mean()),
        decode_mean_l2=float(decode.mean()) if decode.size else 0.0,
        final_step_l2=float(l2[:, -1].mean()),
        final_step_cosine=float(cos[:, -1].mean()),
    )


def run_experiment(
    model: SyntheticMoE,
    inputs: np.ndarray,
    decode_steps: int,
    intervention: Intervention,
) -> DivergenceReport:
    """Baseline vs intervened run on identical inputs."""
    base = simulate(model, inputs, decode_steps, intervention=None)
    mod = simulate(model, inputs, decode_steps, intervention=intervention)
    return divergence_report(base, mod)


def seeded_inputs(
    batch: int, prefill_len: int, d_model: int, seed: int
) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0, size=(batch, prefill_len, d_model))
