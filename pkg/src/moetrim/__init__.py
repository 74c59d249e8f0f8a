"""moetrim: batch-aware expert retention for MoE decoding, without a GPU.

The library routes synthetic batches through top-k expert selection,
applies retention policies that shrink the active expert pool per batch,
replays the result through a seeded toy MoE stack to measure hidden-state
divergence, and prices the latency effect with a calibrated cost model.
"""

from ._version import __version__
from .analysis import (
    ActivationStats,
    LayerReduction,
    ReductionSummary,
    aggregate_frequencies,
    batch_skew_report,
    reduction_summary,
)
from .config import CostSweepConfig, RunConfig, SimKnobs, config_digest, load_run_config
from .costmodel import (
    CalibrationReport,
    CalibrationRow,
    CostModelParams,
    LatencyBreakdown,
    Regime,
    SaturationStats,
    arithmetic_intensity,
    calibrate,
    decode_latency,
    nominal_a100_params,
    read_calibration_table,
    saturation_stats,
    speedup_curve,
)
from .errors import TraceFormatError, ValidationError
from .policy import (
    POLICY_MODES,
    ExpertMask,
    PolicyConfig,
    VoteTally,
    accuracy_policy,
    apply_policy,
    full_retain_mask,
    latency_policy,
    remap_tokens,
    select_important_tokens,
    vote_expert_frequencies,
)
from .router import (
    ExpertSelection,
    MoEModelSpec,
    Phase,
    RoutingLogits,
    confidence,
    route_batch,
    softmax_probs,
    top_k_select,
)
from .simulator import (
    DivergenceReport,
    Intervention,
    SimResult,
    SyntheticMoE,
    build_model,
    deny_expert_rank,
    divergence_report,
    expert_mlp,
    forward_layer,
    layer_mask_schedule,
    rms_norm,
    run_experiment,
    seeded_inputs,
    simulate,
)
from .trace import (
    MaskRecord,
    TraceRecord,
    mask_record_from_event,
    masks_path_for,
    read_masks_jsonl,
    read_trace_jsonl,
    records_from_event,
    write_masks_jsonl,
    write_trace_jsonl,
)
from .workloads import clustered_trace, iid_trace

__all__ = [
    "__version__",
    "ActivationStats",
    "CalibrationReport",
    "CalibrationRow",
    "CostModelParams",
    "CostSweepConfig",
    "DivergenceReport",
    "ExpertMask",
    "ExpertSelection",
    "Intervention",
    "LatencyBreakdown",
    "LayerReduction",
    "MaskRecord",
    "MoEModelSpec",
    "Phase",
    "PolicyConfig",
    "POLICY_MODES",
    "ReductionSummary",
    "Regime",
    "RoutingLogits",
    "RunConfig",
    "SaturationStats",
    "SimKnobs",
    "SimResult",
    "SyntheticMoE",
    "TraceFormatError",
    "TraceRecord",
    "ValidationError",
    "VoteTally",
    "accuracy_policy",
    "aggregate_frequencies",
    "apply_policy",
    "arithmetic_intensity",
    "batch_skew_report",
    "build_model",
    "calibrate",
    "clustered_trace",
    "config_digest",
    "confidence",
    "decode_latency",
    "deny_expert_rank",
    "divergence_report",
    "expert_mlp",
    "forward_layer",
    "full_retain_mask",
    "iid_trace",
    "latency_policy",
    "layer_mask_schedule",
    "load_run_config",
    "mask_record_from_event",
    "masks_path_for",
    "nominal_a100_params",
    "read_calibration_table",
    "read_masks_jsonl",
    "read_trace_jsonl",
    "records_from_event",
    "reduction_summary",
    "remap_tokens",
    "rms_norm",
    "route_batch",
    "run_experiment",
    "saturation_stats",
    "seeded_inputs",
    "select_important_tokens",
    "simulate",
    "softmax_probs",
    "speedup_curve",
    "top_k_select",
    "vote_expert_frequencies",
    "write_masks_jsonl",
    "write_trace_jsonl",
]
