"""Command line front end.

Four subcommands cover the workflow: ``simulate`` runs the synthetic
model under a retention policy and writes routing traces, ``costmodel``
sweeps the latency model (optionally calibrated against measurements),
``analyze`` digests trace files into activation and reduction tables,
and ``ablate`` runs routing-perturbation studies.

All outputs are deterministic: rerunning a command with the same config
and seed produces byte-identical files.  Set MOETRIM_LOG=debug|info for
progress messages on stderr.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from ._version import __version__
from .analysis import aggregate_frequencies, batch_skew_report, reduction_summary
from .config import RunConfig, config_digest, load_run_config
from .costmodel import (
    calibrate,
    decode_latency,
    nominal_a100_params,
    read_calibration_table,
    saturation_stats,
    speedup_curve,
)
from .errors import ValidationError
from .router import Phase
from .simulator import (
    Intervention,
    build_model,
    divergence_report,
    layer_mask_schedule,
    seeded_inputs,
    simulate,
)
from .trace import (
    mask_record_from_event,
    masks_path_for,
    read_masks_jsonl,
    read_trace_jsonl,
    records_from_event,
    write_masks_jsonl,
    write_trace_jsonl,
)

log = logging.getLogger("moetrim")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_rows(out_dir: Path, stem: str, header: list[str], rows: list[tuple],
                fmt: str) -> str:
    """Write tabular rows as CSV or JSONL; returns the file name."""
    if fmt == "csv":
        name = f"{stem}.csv"
        lines = [",".join(header)]
        lines += [",".join(_fmt(v) for v in row) for row in rows]
        _atomic_text(out_dir / name, "\n".join(lines) + "\n")
    else:
        name = f"{stem}.jsonl"
        lines = []
        for row in rows:
            obj = dict(zip(header, [float(v) if isinstance(v, float) else v
                                    for v in row]))
            lines.append(json.dumps(obj, separators=(",", ":")))
        _atomic_text(out_dir / name, "\n".join(lines) + "\n")
    return name


def _write_meta(out_dir: Path, command: str, run_id: str, seed: int,
                config_path: str | None, outputs: list[str]) -> None:
    meta = {
        "command": command,
        "run_id": run_id,
        "seed": seed,
        "version": __version__,
        "outputs": sorted(outputs),
    }
    if config_path is not None:
        meta["config_sha256"] = hashlib.sha256(Path(config_path).read_bytes()).hexdigest()
    _atomic_text(out_dir / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _prepare(config_path: str, seed: int | None, out_dir: str | None):
    cfg = load_run_config(config_path)
    run_seed = cfg.seed if seed is None else seed
    out = Path(out_dir) if out_dir is not None else Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_id = config_digest(config_path, run_seed)
    return cfg, run_seed, out, run_id


def _guard(fn):
    """Turn validation failures into exit code 2 with a clean message."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ValidationError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def common_options(fn):
    fn = click.option("--format", "fmt", type=click.Choice(["csv", "jsonl"]),
                      default="csv", show_default=True,
                      help="Row-file output format.")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default=None,
                      help="Output directory (overrides [run].out_dir).")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Seed override (defaults to [batches].seed).")(fn)
    return fn


@click.group()
@click.version_option(version=__version__, prog_name="moetrim")
def main() -> None:
    """Batch-aware expert retention: simulate, price, and analyze."""
    level = os.environ.get("MOETRIM_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command("simulate")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Run config (TOML).")
@common_options
@_guard
def simulate_cmd(config_path: str, seed: int | None, out_dir: str | None,
                 fmt: str) -> None:
    """Run the synthetic model and write routing traces.

    Produces trace.jsonl (per-slot routing records), trace.masks.jsonl
    (per-event retained sets), divergence rows, report.txt and meta.json.
    Without a [policy] section the run is a baseline and divergence is
    zero by construction.
    """
    cfg, run_seed, out, run_id = _prepare(config_path, seed, out_dir)
    model = build_model(
        cfg.spec, run_seed,
        d_head=cfg.sim.d_head, router_gain=cfg.sim.router_gain,
        attn_gain=cfg.sim.attn_gain, expert_gain=cfg.sim.expert_gain,
    )
    intervention = None
    if cfg.policy is not None:
        intervention = Intervention(kind="policy", policy=cfg.policy)

    records, masks = [], []

    def sink(event: int, layer: int, phase: Phase, selection, mask) -> None:
        records.extend(records_from_event(run_id, event, layer, phase, selection, mask))
        masks.append(mask_record_from_event(run_id, event, layer, phase, mask))

    div_rows = []
    event = 0
    gidx = 0
    for size in cfg.batch_sizes:
        for b in range(cfg.batches_per_size):
            inputs = seeded_inputs(size, cfg.prefill_len, cfg.spec.d_model,
                                   run_seed * 100_003 + gidx)
            base = simulate(model, inputs, cfg.decode_steps)
            mod = simulate(model, inputs, cfg.decode_steps,
                           intervention=intervention, trace_sink=sink,
                           batch_event_start=event)
            event += 1 + cfg.decode_steps
            gidx += 1
            rep = divergence_report(base, mod)
            div_rows.append((size, b, rep.mean_l2, rep.prefill_mean_l2,
                             rep.decode_mean_l2, rep.final_step_l2,
                             rep.final_step_cosine))
            log.info("simulated batch size=%d index=%d final_l2=%.4g",
                     size, b, rep.final_step_l2)

    trace_path = out / "trace.jsonl"
    write_trace_jsonl(trace_path, records)
    write_masks_jsonl(masks_path_for(trace_path), masks)
    outputs = ["trace.jsonl", masks_path_for(trace_path).name]
    outputs.append(_write_rows(
        out, "divergence",
        ["batch_size", "batch_index", "mean_l2", "prefill_mean_l2",
         "decode_mean_l2", "final_step_l2", "final_step_cosine"],
        div_rows, fmt,
    ))

    clipped = sum(1 for m in masks if m.clipped)
    decode_masks = [m for m in masks if m.phase == "decode"]
    mean_retained = (
        float(np.mean([len(m.retained) for m in decode_masks]))
        if decode_masks else float(cfg.spec.num_experts)
    )
    lines = [
        f"moetrim simulate  run_id={run_id}  version={__version__}",
        f"model: layers={cfg.spec.num_layers} experts={cfg.spec.num_experts} "
        f"top_k={cfg.spec.top_k} d_model={cfg.spec.d_model} d_ff={cfg.spec.d_ff}",
        "policy: none" if cfg.policy is None else
        f"policy: mode={cfg.policy.mode} drop_count={cfg.policy.drop_count} "
        f"threshold={_fmt(cfg.policy.confidence_threshold)} "
        f"min_experts={cfg.policy.resolved_min_experts(cfg.spec.top_k)}",
        f"batches: sizes={list(cfg.batch_sizes)} count={cfg.batches_per_size} "
        f"prefill={cfg.prefill_len} decode={cfg.decode_steps} seed={run_seed}",
        f"trace records: {len(records)}",
        f"routing events: {len(masks)} (clipped: {clipped})",
        f"mean retained experts (decode): {_fmt(mean_retained)}",
    ]
    for row in div_rows:
        lines.append(
            f"divergence size={row[0]} batch={row[1]}: mean_l2={_fmt(row[2])} "
            f"decode={_fmt(row[4])} final={_fmt(row[5])}"
        )
    if clipped:
        lines.append(
            f"warning: {clipped} events hit the min-experts floor; "
            "requested drop was clipped, run completed"
        )
    _atomic_text(out / "report.txt", "\n".join(lines) + "\n")
    outputs.append("report.txt")
    _write_meta(out, "simulate", run_id, run_seed, config_path, outputs)
    click.echo(f"simulate: wrote {len(records)} trace records to {out}")
    if clipped:
        click.echo(
            f"warning: min-experts floor clipped the requested drop in "
            f"{clipped} events", err=True,
        )


@main.command("costmodel")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Run config (TOML); uses [model] and [costmodel].")
@common_options
@_guard
def costmodel_cmd(config_path: str, seed: int | None, out_dir: str | None,
                  fmt: str) -> None:
    """Sweep the latency model over batch sizes and expert pools.

    With [costmodel].calibration pointing at a measurement table the
    hardware profile is fitted first; otherwise nominal defaults apply.
    Writes latency, speedup and saturation tables plus report.txt.
    """
    cfg, run_seed, out, run_id = _prepare(config_path, seed, out_dir)
    spec = cfg.spec
    cost = cfg.cost

    calib_text = None
    if cost.calibration_path is not None:
        table = Path(cost.calibration_path)
        if not table.is_absolute():
            table = Path(config_path).parent / table
        rows = read_calibration_table(table)
        params, calrep = calibrate(rows, spec, cost.calibration_active_experts)
        calib_text = calrep.to_text()
        log.info("calibrated on %d rows, max rel err %.3g",
                 len(rows), calrep.max_abs_rel_err)
    else:
        params = nominal_a100_params(spec)

    counts = list(cost.expert_counts)
    if not counts:
        e = spec.num_experts
        while e >= max(1, spec.top_k):
            counts.append(e)
            e //= 2
    counts = sorted(set(counts), reverse=True)

    lat_rows, curve_rows, speed_rows = [], [], []
    for n in cost.batch_sizes:
        for e in counts:
            b = decode_latency(params, spec, n, e, cost.seq_len)
            lat_rows.append((n, e, b.attn_ms, b.route_ms, b.mlp_ms, b.total_ms,
                             b.regime.value, b.stall_share))
            curve_rows.append((n, f"active={e}", b.total_ms))
        for e, s in speedup_curve(params, spec, n, counts, cost.seq_len):
            speed_rows.append((n, f"{spec.num_experts}->{e}", s))

    outputs = []
    outputs.append(_write_rows(
        out, "latency",
        ["batch_size", "active_experts", "attn_ms", "route_ms", "mlp_ms",
         "total_ms", "regime", "stall_share"], lat_rows, fmt))
    outputs.append(_write_rows(out, "latency_curves", ["x", "series", "value"],
                               curve_rows, fmt))
    outputs.append(_write_rows(out, "speedup_curves", ["x", "series", "value"],
                               speed_rows, fmt))

    sat_rows, sat_note = [], None
    try:
        for n in cost.batch_sizes:
            st = saturation_stats(n, spec.num_experts, spec.top_k,
                                  trials=cost.saturation_trials, seed=run_seed)
            sat_rows.append((n, st.expected_active, st.p_all_active,
                             st.mc_expected_active, st.mc_p_all_active,
                             st.mc_sigma_p_all))
    except ValidationError as exc:
        sat_note = f"saturation sweep skipped: {exc}"
        sat_rows = []
    if sat_rows:
        outputs.append(_write_rows(
            out, "saturation",
            ["batch_size", "expected_active", "p_all_active",
             "mc_expected_active", "mc_p_all_active", "mc_sigma"],
            sat_rows, fmt))

    lines = [
        f"moetrim costmodel  run_id={run_id}  version={__version__}",
        f"model: experts={spec.num_experts} top_k={spec.top_k} "
        f"d_model={spec.d_model} d_ff={spec.d_ff} "
        f"expert_param_bytes={spec.expert_param_bytes}",
        f"profile: bandwidth={_fmt(params.hbm_bandwidth)} B/s "
        f"peak={_fmt(params.peak_compute)} flop/s "
        f"route={_fmt(params.route_ms_per_layer)} ms/layer",
        f"source: {'calibrated' if calib_text else 'nominal defaults'}",
    ]
    half = spec.num_experts // 2
    for n in cost.batch_sizes:
        for e, s in speedup_curve(params, spec, n, counts, cost.seq_len):
            if e == half:
                band = cost.speedup_band_low <= s <= cost.speedup_band_high
                lines.append(
                    f"speedup batch={n} {spec.num_experts}->{e}: {_fmt(s)} "
                    f"(band [{_fmt(cost.speedup_band_low)}, "
                    f"{_fmt(cost.speedup_band_high)}]: "
                    f"{'within' if band else 'outside'})"
                )
    for row in sat_rows:
        lines.append(
            f"saturation batch={row[0]}: expected_active={_fmt(row[1])} "
            f"p_all_active={_fmt(row[2])}"
        )
    if sat_note:
        lines.append(sat_note)
    _atomic_text(out / "report.txt", "\n".join(lines) + "\n")
    outputs.append("report.txt")
    if calib_text is not None:
        _atomic_text(out / "calibration_report.txt", calib_text + "\n")
        outputs.append("calibration_report.txt")
    _write_meta(out, "costmodel", run_id, run_seed, config_path, outputs)
    click.echo(f"costmodel: wrote latency/speedup tables to {out}")


@main.command()
@click.argument("trace", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Optional run config; pins the expert pool size.")
@common_options
@_guard
def analyze(trace: str, config_path: str | None, seed: int | None,
            out_dir: str | None, fmt: str) -> None:
    """Digest a routing trace into activation and reduction tables.

    TRACE is a trace.jsonl produced by simulate; the sibling masks file
    is picked up automatically when present.  --seed is accepted for
    interface symmetry; analysis itself is deterministic.
    """
    records = read_trace_jsonl(trace)
    if not records:
        raise ValidationError(f"{trace}: no records")
    masks_path = masks_path_for(trace)
    masks = read_masks_jsonl(masks_path) if masks_path.exists() else None

    num_experts = None
    if config_path is not None:
        num_experts = load_run_config(config_path).spec.num_experts
    out = Path(out_dir) if out_dir is not None else Path("analysis_out")
    out.mkdir(parents=True, exist_ok=True)
    run_id = records[0].run_id

    layers = sorted({r.layer for r in records})
    act_rows = []
    orig = aggregate_frequencies(records, num_experts)
    asgn = aggregate_frequencies(records, num_experts, use_assigned=True)
    for e in range(orig.shape[0]):
        act_rows.append(("all", e, float(orig[e]), float(asgn[e])))
    for layer in layers:
        sub = [r for r in records if r.layer == layer]
        o = aggregate_frequencies(sub, orig.shape[0])
        a = aggregate_frequencies(sub, orig.shape[0], use_assigned=True)
        for e in range(o.shape[0]):
            act_rows.append((f"layer={layer}", e, float(o[e]), float(a[e])))

    skew_rows, skew_notes = [], []
    scopes = [("all", None)] + [(f"layer={l}", l) for l in layers]
    for name, layer in scopes:
        try:
            st = batch_skew_report(records, orig.shape[0], layer=layer)
            skew_rows.append((name, st.aggregate_std,
                              float(st.per_batch_std.max()), st.skew_ratio))
        except ValidationError as exc:
            skew_notes.append(f"skew {name}: {exc}")

    red = reduction_summary(records, masks)
    red_rows = [(lr.layer, lr.mean_retained, lr.min_retained, lr.max_retained,
                 lr.clipped_events) for lr in red.per_layer]

    outputs = []
    outputs.append(_write_rows(
        out, "activation",
        ["scope", "expert", "frequency_original", "frequency_assigned"],
        act_rows, fmt))
    if skew_rows:
        outputs.append(_write_rows(
            out, "skew",
            ["scope", "aggregate_std", "max_per_batch_std", "skew_ratio"],
            skew_rows, fmt))
    outputs.append(_write_rows(
        out, "reduction",
        ["layer", "mean_retained", "min_retained", "max_retained",
         "clipped_events"], red_rows, fmt))

    lines = [
        f"moetrim analyze  run_id={run_id}  version={__version__}",
        f"records: {len(records)}  layers: {len(layers)}  "
        f"experts: {orig.shape[0]}",
        f"mean retained experts (decode): {_fmt(red.mean_retained)}",
        f"remap rate: {_fmt(red.remap_rate)}",
    ]
    if red.important_fraction is not None:
        lines.append(f"important-token fraction: {_fmt(red.important_fraction)}")
    for row in skew_rows:
        lines.append(
            f"skew {row[0]}: aggregate_std={_fmt(row[1])} "
            f"max_per_batch_std={_fmt(row[2])} ratio={_fmt(row[3])}"
        )
    lines.extend(skew_notes)
    _atomic_text(out / "report.txt", "\n".join(lines) + "\n")
    outputs.append("report.txt")
    _write_meta(out, "analyze", run_id, 0 if seed is None else seed,
                config_path, outputs)
    click.echo(f"analyze: wrote activation/skew/reduction tables to {out}")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Run config (TOML).")
@click.option("--study", type=click.Choice(
    ["rank", "layer_window", "phase", "confidence"]), default="rank",
    show_default=True, help="Which perturbation study to run.")
@click.option("--window", type=int, default=None,
              help="Preserved-layer window size for the layer_window study "
                   "(default: half the layer count).")
@common_options
@_guard
def ablate(config_path: str, study: str, window: int | None,
           seed: int | None, out_dir: str | None, fmt: str) -> None:
    """Run a routing-perturbation study and write a divergence table.

    rank: deny each preference rank in turn.  layer_window: deny the top
    preference outside a sliding window of layers.  phase: prefill-only
    vs decode-only denial at matched token budgets.  confidence: sweep a
    confidence threshold, denying the top preference of tokens above it
    (high series) and below it (low series).
    """
    cfg, run_seed, out, run_id = _prepare(config_path, seed, out_dir)
    spec = cfg.spec
    if spec.top_k >= spec.num_experts:
        raise ValidationError("ablation needs top_k < num_experts")
    model_cache: dict[int, object] = {}

    def divergence_for(intervention: Intervention, rep_seed: int) -> float:
        if rep_seed not in model_cache:
            model_cache[rep_seed] = build_model(
                spec, rep_seed,
                d_head=cfg.sim.d_head, router_gain=cfg.sim.router_gain,
                attn_gain=cfg.sim.attn_gain, expert_gain=cfg.sim.expert_gain,
            )
        model = model_cache[rep_seed]
        inputs = seeded_inputs(cfg.batch_sizes[0], cfg.prefill_len,
                               spec.d_model, rep_seed + 17)
        base = simulate(model, inputs, cfg.decode_steps)
        mod = simulate(model, inputs, cfg.decode_steps, intervention=intervention)
        return divergence_report(base, mod).final_step_l2

    reps = range(cfg.batches_per_size)
    rows: list[tuple] = []
    if study == "rank":
        for rank in range(spec.top_k):
            vals = [divergence_for(Intervention(kind="deny_rank", rank=rank),
                                   run_seed + r) for r in reps]
            rows.append((rank, "final_step_l2", float(np.mean(vals))))
    elif study == "layer_window":
        if window is None:
            window = max(1, spec.num_layers // 2)
        if not (1 <= window <= spec.num_layers):
            raise ValidationError(
                f"window must be in [1, {spec.num_layers}], got {window}"
            )
        for start, iv in enumerate(layer_mask_schedule(spec.num_layers, window)):
            vals = [divergence_for(iv, run_seed + r) for r in reps]
            rows.append((start, f"window={window}", float(np.mean(vals))))
    elif study == "phase":
        if cfg.decode_steps < cfg.prefill_len:
            raise ValidationError(
                "phase study needs decode_steps >= prefill_len for a "
                "matched perturbation budget"
            )
        conds = [
            ("prefill_only", Intervention(
                kind="deny_rank", rank=0, phases=frozenset({Phase.PREFILL}))),
            ("decode_only", Intervention(
                kind="deny_rank", rank=0, phases=frozenset({Phase.DECODE}),
                decode_step_limit=cfg.prefill_len)),
        ]
        for name, iv in conds:
            vals = [divergence_for(iv, run_seed + r) for r in reps]
            rows.append((name, "final_step_l2", float(np.mean(vals))))
    else:  # confidence
        taus = [round(0.3 + 0.1 * i, 1) for i in range(7)]  # 0.3 .. 0.9
        series = [("high_confidence", "above_threshold"),
                  ("low_confidence", "below_threshold")]
        for tau in taus:
            for name, mode in series:
                iv = Intervention(kind="deny_rank", rank=0, token_mode=mode,
                                  token_threshold=tau,
                                  phases=frozenset({Phase.DECODE}))
                vals = [divergence_for(iv, run_seed + r) for r in reps]
                rows.append((tau, name, float(np.mean(vals))))

    outputs = [_write_rows(out, f"ablation_{study}", ["x", "series", "value"],
                           rows, fmt)]
    lines = [
        f"moetrim ablate  run_id={run_id}  version={__version__}",
        f"study: {study}  replicates: {cfg.batches_per_size}  "
        f"batch={cfg.batch_sizes[0]} prefill={cfg.prefill_len} "
        f"decode={cfg.decode_steps}",
    ]
    for row in rows:
        lines.append(f"{study} x={row[0]} {row[1]}: {_fmt(row[2])}")
    _atomic_text(out / "report.txt", "\n".join(lines) + "\n")
    outputs.append("report.txt")
    _write_meta(out, "ablate", run_id, run_seed, config_path, outputs)
    click.echo(f"ablate: wrote {study} study to {out}")


if __name__ == "__main__":
    main()
