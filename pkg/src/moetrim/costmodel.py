"""Decode-step latency model and batch saturation statistics.

The MLP term combines a weight-streaming floor (all active experts'
parameters must come from memory at least once per step) with an
effective compute time whose per-token cost rises as the active pool
spreads tokens across more, smaller expert batches.  That dispatch
penalty decays as batches grow, so large prefill-sized batches converge
to pure compute scaling while small decode batches stay memory-driven.
A plain max(memory, compute) roofline cannot reproduce both the
near-linear batch scaling of measured decode costs and the observed
gains from halving the active pool at those same batch sizes; the stall
term is what reconciles the two regimes.

Attention is linear in batch size at fixed context length and does not
depend on expert count; routing cost is a constant per layer.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .router import MoEModelSpec


class Regime(Enum):
    COMPUTE_BOUND = "compute_bound"
    MEMORY_BOUND = "memory_bound"


@dataclass(frozen=True)
class CostModelParams:
    """Effective hardware profile; fitted values, not datasheet numbers."""

    hbm_bandwidth: float          # bytes/s, effective weight-streaming rate
    peak_compute: float           # flops/s, effective
    route_ms_per_layer: float     # constant routing cost per layer-batch
    attn_base_ms: float
    attn_per_token_ms: float
    attn_per_token_per_ctx_ms: float = 0.0
    ref_seq_len: int = 500
    dispatch_alpha: float = 0.57        # per-token cost ~ (active/k)^alpha
    overlap_decay_tokens: float = 1500.0  # dispatch penalty halves past this
    memory_bound_share: float = 0.25    # stall share above which we call it memory bound
    compute_bound_tokens: float = 16000.0  # batch beyond which decode acts compute bound

    def __post_init__(self) -> None:
        for name in ("hbm_bandwidth", "peak_compute"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        for name in (
            "route_ms_per_layer",
            "attn_base_ms",
            "attn_per_token_ms",
            "dispatch_alpha",
        ):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.overlap_decay_tokens <= 0:
            raise ValidationError("overlap_decay_tokens must be positive")
        if not (0.0 < self.memory_bound_share < 1.0):
            raise ValidationError("memory_bound_share must be in (0, 1)")


@dataclass(frozen=True)
class LatencyBreakdown:
    attn_ms: float
    route_ms: float
    mlp_ms: float
    total_ms: float
    regime: Regime
    stall_share: float  # fraction of mlp time above ideal compute


def nominal_a100_params(spec: MoEModelSpec) -> CostModelParams:
    """A100-class defaults, clearly nominal; calibrate against measurements."""
    return CostModelParams(
        hbm_bandwidth=1.6e13,
        peak_compute=2.5e13,
        route_ms_per_layer=0.0725 / spec.num_layers,
        attn_base_ms=0.055,
        attn_per_token_ms=0.174,
    )


def arithmetic_intensity(
    batch_size: int, top_k: int, total_experts: int
) -> float:
    """Tokens of work per unit of expert weight traffic: n * k / E."""
    if batch_size < 1 or top_k < 1 or total_experts < 1:
        raise ValidationError(
            "batch_size, top_k, and total_experts must all be >= 1"
        )
    return batch_size * top_k / total_experts


def _flops_per_token_layer(spec: MoEModelSpec) -> float:
    # k experts per token, two matrices each, 2 flops per MAC.
    return 4.0 * spec.d_model * spec.d_ff * spec.top_k


def _dispatch_factor(params: CostModelParams, spec: MoEModelSpec, active: int) -> float:
    return (max(active, spec.top_k) / spec.top_k) ** params.dispatch_alpha


def _mlp_layer_seconds(
    params: CostModelParams, spec: MoEModelSpec, batch_size: int, active: int
) -> tuple[float, float]:
    """(mlp seconds per layer, ideal-compute seconds per layer)."""
    comp = batch_size * _flops_per_token_layer(spec) / params.peak_compute
    decay = params.overlap_decay_tokens / (params.overlap_decay_tokens + batch_size)
    stall = comp * (_dispatch_factor(params, spec, active) - 1.0) * decay
    floor = active * spec.expert_param_bytes / params.hbm_bandwidth
    return max(floor, comp + stall), comp


def decode_latency(
    params: CostModelParams,
    spec: MoEModelSpec,
    batch_size: int,
    active_experts: int,
    seq_len: int | None = None,
) -> LatencyBreakdown:
    """Per-step latency breakdown for a batch with a given active pool."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    if not (1 <= active_experts <= spec.num_experts):
        raise ValidationError(
            f"active_experts must be in [1, {spec.num_experts}], got {active_experts}"
        )
    ctx = params.ref_seq_len if seq_len is None else seq_len
    if ctx < 1:
        raise ValidationError("seq_len must be >= 1")

    mlp_layer, comp_layer = _mlp_layer_seconds(params, spec, batch_size, active_experts)
    mlp_ms = mlp_layer * spec.num_layers * 1e3
    attn_ms = params.attn_base_ms + batch_size * (
        params.attn_per_token_ms
        + params.attn_per_token_per_ctx_ms * (ctx - params.ref_seq_len)
    )
    route_ms = params.route_ms_per_layer * spec.num_layers
    stall_share = 0.0 if mlp_layer <= 0 else (mlp_layer - comp_layer) / mlp_layer
    regime = (
        Regime.MEMORY_BOUND
        if stall_share > params.memory_bound_share
        else Regime.COMPUTE_BOUND
    )
    return LatencyBreakdown(
        attn_ms=attn_ms,
        route_ms=route_ms,
        mlp_ms=mlp_ms,
        total_ms=attn_ms + route_ms + mlp_ms,
        regime=regime,
        stall_share=stall_share,
    )


def speedup_curve(
    params: CostModelParams,
    spec: MoEModelSpec,
    batch_size: int,
    expert_counts: list[int],
    seq_len: int | None = None,
) -> list[tuple[int, float]]:
    """Speedup of each reduced pool against the full pool at this batch size."""
    if not expert_counts:
        raise ValidationError("expert_counts must not be empty")
    full = decode_latency(params, spec, batch_size, spec.num_experts, seq_len)
    out = []
    for e in expert_counts:
        reduced = decode_latency(params, spec, batch_size, e, seq_len)
        out.append((e, full.total_ms / reduced.total_ms))
    return out


# --- calibration ---------------------------------------------------------


@dataclass(frozen=True)
class CalibrationRow:
    batch_size: int
    attn_ms: float
    route_ms: float
    mlp_ms: float


@dataclass(frozen=True)
class CalibrationReport:
    rows: tuple[CalibrationRow, ...]
    attn_pred_ms: tuple[float, ...]
    mlp_pred_ms: tuple[float, ...]
    attn_rel_err: tuple[float, ...]
    mlp_rel_err: tuple[float, ...]
    route_fraction: tuple[float, ...]
    max_abs_rel_err: float

    def to_text(self) -> str:
        lines = [
            "calibration fit",
            f"{'batch':>6} {'attn_meas':>10} {'attn_pred':>10} {'mlp_meas':>10} "
            f"{'mlp_pred':>10} {'attn_err%':>10} {'mlp_err%':>9} {'route%':>7}",
        ]
        for i, row in enumerate(self.rows):
            lines.append(
                f"{row.batch_size:>6} {row.attn_ms:>10.3f} {self.attn_pred_ms[i]:>10.3f} "
                f"{row.mlp_ms:>10.3f} {self.mlp_pred_ms[i]:>10.3f} "
                f"{100 * self.attn_rel_err[i]:>10.2f} {100 * self.mlp_rel_err[i]:>9.2f} "
                f"{100 * self.route_fraction[i]:>7.3f}"
            )
        lines.append(f"max |relative error|: {100 * self.max_abs_rel_err:.2f}%")
        return "\n".join(lines)


def calibrate(
    measurements: list[CalibrationRow],
    spec: MoEModelSpec,
    active_experts: int,
    base: CostModelParams | None = None,
) -> tuple[CostModelParams, CalibrationReport]:
    """Least-squares fit of the per-step cost columns.

    Attention coefficients come from an affine fit over batch size, the
    routing constant from the column mean, and the effective compute
    rate from the mlp column under the active pool the measurements were
    taken with.  Streaming bandwidth, the dispatch exponent, and the
    decay constant stay at their profile values; they are not
    identifiable from a fixed-pool table.
    """
    if len(measurements) < 2:
        raise ValidationError("calibration needs at least 2 rows")
    if base is None:
        base = nominal_a100_params(spec)
    if not (1 <= active_experts <= spec.num_experts):
        raise ValidationError("active_experts out of range for the model spec")

    n = np.array([r.batch_size for r in measurements], dtype=np.float64)
    if np.unique(n).size < 2:
        raise ValidationError(
            "calibration rows must cover at least two distinct batch sizes"
        )
    attn = np.array([r.attn_ms for r in measurements])
    route = np.array([r.route_ms for r in measurements])
    mlp = np.array([r.mlp_ms for r in measurements])
    if np.any(attn < 0) or np.any(route < 0) or np.any(mlp <= 0):
        raise ValidationError("calibration columns must be positive")

    design = np.stack([np.ones_like(n), n], axis=1)
    (a0, a1), *_ = np.linalg.lstsq(design, attn, rcond=None)
    a0, a1 = max(float(a0), 0.0), max(float(a1), 0.0)

    route_per_layer = float(route.mean()) / spec.num_layers

    # The mlp prediction is linear in 1/peak_compute when the dispatch
    # branch binds, which it does across decode-scale batch sizes.
    factor = _dispatch_factor(base, spec, active_experts)
    decay = base.overlap_decay_tokens / (base.overlap_decay_tokens + n)
    x = (
        1e3
        * spec.num_layers
        * n
        * _flops_per_token_layer(spec)
        * (1.0 + (factor - 1.0) * decay)
    )
    beta = float(np.dot(x, mlp) / np.dot(x, x))
    if beta <= 0:
        raise ValidationError("mlp column produced a non-positive compute rate")
    peak = 1.0 / beta

    params = replace(
        base,
        peak_compute=peak,
        route_ms_per_layer=route_per_layer,
        attn_base_ms=a0,
        attn_per_token_ms=a1,
    )

    attn_pred, mlp_pred, attn_err, mlp_err, route_frac = [], [], [], [], []
    for row in measurements:
        bd = decode_latency(params, spec, row.batch_size, active_experts)
        attn_pred.append(bd.attn_ms)
        mlp_pred.append(bd.mlp_ms)
        attn_err.append((bd.attn_ms - row.attn_ms) / row.attn_ms)
        mlp_err.append((bd.mlp_ms - row.mlp_ms) / row.mlp_ms)
        route_frac.append(bd.route_ms / bd.total_ms)
    errs = [abs(e) for e in attn_err + mlp_err]
    report = CalibrationReport(
        rows=tuple(measurements),
        attn_pred_ms=tuple(attn_pred),
        mlp_pred_ms=tuple(mlp_pred),
        attn_rel_err=tuple(attn_err),
        mlp_rel_err=tuple(mlp_err),
        route_fraction=tuple(route_frac),
        max_abs_rel_err=max(errs),
    )
    return params, report


def read_calibration_table(path: str | Path) -> list[CalibrationRow]:
    """Read a delimited text table with a header naming the four columns."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read calibration table {path}: {exc}") from exc
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [(i + 1, ln) for i, ln in enumerate(lines) if ln and not ln.startswith("#")]
    if not lines:
        raise ValidationError(f"{path}: empty calibration table")
    header_no, header = lines[0]
    delim = "," if "," in header else None
    cols = [c.strip() for c in header.split(delim)]
    required = ("batch_size", "attn_ms", "route_ms", "mlp_ms")
    try:
        idx = {name: cols.index(name) for name in required}
    except ValueError as exc:
        raise ValidationError(
            f"{path}:{header_no}: header must name columns {required}"
        ) from exc
    rows = []
    for line_no, ln in lines[1:]:
        parts = [p.strip() for p in ln.split(delim)]
        if len(parts) < len(cols):
            raise ValidationError(f"{path}:{line_no}: expected {len(cols)} fields")
        try:
            rows.append(
                CalibrationRow(
                    batch_size=int(parts[idx["batch_size"]]),
                    attn_ms=float(parts[idx["attn_ms"]]),
                    route_ms=float(parts[idx["route_ms"]]),
                    mlp_ms=float(parts[idx["mlp_ms"]]),
                )
            )
        except ValueError as exc:
            raise ValidationError(f"{path}:{line_no}: {exc}") from exc
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return rows


# --- expert saturation ---------------------------------------------------


@dataclass(frozen=True)
class SaturationStats:
    batch_size: int
    num_experts: int
    top_k: int
    expected_active: float
    p_all_active: float
    mc_expected_active: float
    mc_p_all_active: float
    mc_sigma_p_all: float
    trials: int


def _uniform_p_all_active(batch_size: int, n_experts: int, k: int) -> Fraction:
    """Exact coverage probability under i.i.d. uniform size-k routing."""
    total = math.comb(n_experts, k)
    p = Fraction(0)
    for j in range(n_experts + 1):
        avoid = Fraction(math.comb(n_experts - j, k), total) if n_experts - j >= k else Fraction(0)
        p += (-1) ** j * math.comb(n_experts, j) * avoid**batch_size
    return p


def _general_p_all_active(
    batch_size: int, n_experts: int, subset_probs: dict[int, float]
) -> float:
    """Inclusion-exclusion over avoided expert sets, via a subset-sum table.

    subset_probs maps each support subset (bitmask) to its probability.
    cover[m] accumulates P(token's subset is contained in m); the
    avoided-set probability for S is then cover[~S].
    """
    size = 1 << n_experts
    cover = np.zeros(size)
    for mask, prob in subset_probs.items():
        cover[mask] += prob
    for bit in range(n_experts):
        step = 1 << bit
        for m in range(size):
            if m & step:
                cover[m] += cover[m ^ step]
    full = size - 1
    p = 0.0
    for s in range(size):
        j = bin(s).count("1")
        p += (-1) ** j * cover[full ^ s] ** batch_size
    return p


def saturation_stats(
    batch_size: int,
    num_experts: int,
    top_k: int,
    subset_probs: dict[tuple[int, ...], float] | None = None,
    trials: int = 100_000,
    seed: int = 0,
) -> SaturationStats:
    """Expected active experts and P(every expert active) for one batch.

    Tokens route independently to size-k expert subsets; the default
    distribution is uniform over all such subsets.  The exact values use
    inclusion-exclusion (rational arithmetic in the uniform case); a
    seeded Monte Carlo estimate rides along as a cross-check.
    """
    if num_experts < 1 or not (1 <= top_k <= num_experts):
        raise ValidationError("need 1 <= top_k <= num_experts")
    if num_experts > 16:
        raise ValidationError("exact statistics supported for num_experts <= 16")
    if batch_size < 1 or batch_size > 64:
        raise ValidationError("batch_size must be in [1, 64]")
    if trials < 1:
        raise ValidationError("trials must be >= 1")

    rng = np.random.default_rng(seed)
    if subset_probs is None:
        combos = [
            sum(1 << e for e in c)
            for c in itertools.combinations(range(num_experts), top_k)
        ]
        p_avoid = Fraction(num_experts - top_k, num_experts)
        exact_expected = num_experts * (1 - p_avoid**batch_size)
        exact_p_all = float(_uniform_p_all_active(batch_size, num_experts, top_k))
        weights = None
    else:
        combos = []
        probs = []
        for subset, prob in subset_probs.items():
            if len(set(subset)) != top_k:
                raise ValidationError(f"subset {subset} is not a size-{top_k} set")
            if any(e < 0 or e >= num_experts for e in subset):
                raise ValidationError(f"subset {subset} has out-of-range experts")
            if prob < 0:
                raise ValidationError("subset probabilities must be nonnegative")
            combos.append(sum(1 << e for e in subset))
            probs.append(prob)
        total = sum(probs)
        if total <= 0:
            raise ValidationError("subset probabilities must sum to a positive value")
        weights = np.array(probs) / total
        mask_probs: dict[int, float] = {}
        for mask, w in zip(combos, weights):
            mask_probs[mask] = mask_probs.get(mask, 0.0) + float(w)
        p_cover = np.array(
            [
                sum(w for mask, w in mask_probs.items() if mask >> e & 1)
                for e in range(num_experts)
            ]
        )
        exact_expected = float(np.sum(1.0 - (1.0 - p_cover) ** batch_size))
        exact_p_all = _general_p_all_active(batch_size, num_experts, mask_probs)

    combo_arr = np.array(combos, dtype=np.int64)
    draws = rng.choice(combo_arr.shape[0], size=(trials, batch_size), p=weights)
    unions = np.bitwise_or.reduce(combo_arr[draws], axis=1)
    popcount = np.array([bin(m).count("1") for m in range(1 << num_experts)])
    active_counts = popcount[unions]
    mc_expected = float(active_counts.mean())
    mc_p_all = float((active_counts == num_experts).mean())
    sigma = math.sqrt(max(mc_p_all * (1 - mc_p_all), 1e-12) / trials)

    return SaturationStats(
        batch_size=batch_size,
        num_experts=num_experts,
        top_k=top_k,
        expected_active=float(exact_expected),
        p_all_active=float(exact_p_all),
        mc_expected_active=mc_expected,
        mc_p_all_active=mc_p_all,
        mc_sigma_p_all=sigma,
        trials=trials,
    )
