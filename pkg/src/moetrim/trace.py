"""Persisted routing traces.

A trace is JSONL with one record per (batch event, layer, token, rank)
slot.  A sibling masks file carries one record per (batch event, layer)
with the retained expert set, because the retained pool is not
recoverable from token-level records alone (a retained expert may serve
no token after remapping).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import TraceFormatError
from .policy import ExpertMask
from .router import ExpertSelection, Phase

TRACE_FIELDS = (
    "run_id",
    "layer",
    "batch_id",
    "phase",
    "token_id",
    "rank",
    "expert_original",
    "expert_assigned",
    "weight",
    "confidence",
)

PHASES = ("prefill", "decode")


@dataclass(frozen=True)
class TraceRecord:
    run_id: str
    layer: int
    batch_id: int
    phase: str
    token_id: int
    rank: int
    expert_original: int
    expert_assigned: int
    weight: float
    confidence: float

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise TraceFormatError(f"phase must be one of {PHASES}, got {self.phase!r}")
        for name in ("layer", "batch_id", "token_id", "rank", "expert_original",
                     "expert_assigned"):
            if int(getattr(self, name)) < 0:
                raise TraceFormatError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class MaskRecord:
    run_id: str
    batch_id: int
    layer: int
    phase: str
    retained: tuple[int, ...]
    clipped: bool
    num_tokens: int
    num_important: int | None = None

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise TraceFormatError(f"phase must be one of {PHASES}, got {self.phase!r}")
        object.__setattr__(
            self, "retained", tuple(int(e) for e in self.retained)
        )


def records_from_event(
    run_id: str,
    batch_id: int,
    layer: int,
    phase: Phase,
    selection: ExpertSelection,
    mask: ExpertMask,
) -> list[TraceRecord]:
    """Flatten one layer-batch routing event into per-slot records."""
    conf = selection.confidence()
    out = []
    n, k = mask.remap_original.shape
    for t in range(n):
        for r in range(k):
            out.append(
                TraceRecord(
                    run_id=run_id,
                    layer=layer,
                    batch_id=batch_id,
                    phase=phase.value,
                    token_id=t,
                    rank=r,
                    expert_original=int(mask.remap_original[t, r]),
                    expert_assigned=int(mask.remap_assigned[t, r]),
                    weight=float(mask.remap_weights[t, r]),
                    confidence=float(conf[t]),
                )
            )
    return out


def mask_record_from_event(
    run_id: str, batch_id: int, layer: int, phase: Phase, mask: ExpertMask
) -> MaskRecord:
    important = mask.important_tokens
    return MaskRecord(
        run_id=run_id,
        batch_id=batch_id,
        layer=layer,
        phase=phase.value,
        retained=tuple(int(e) for e in mask.retained),
        clipped=bool(mask.clipped),
        num_tokens=mask.num_tokens,
        num_important=None if important is None else int(len(important)),
    )


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_trace_jsonl(path: str | Path, records: Iterable[TraceRecord]) -> None:
    path = Path(path)
    lines = [
        json.dumps({f: getattr(r, f) for f in TRACE_FIELDS}, separators=(",", ":"))
        for r in records
    ]
    _atomic_write(path, "\n".join(lines) + ("\n" if lines else ""))


def read_trace_jsonl(path: str | Path) -> list[TraceRecord]:
    path = Path(path)
    if not path.is_file():
        raise TraceFormatError(f"{path}: no such trace file")
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"{path}:{line_no}: malformed record: {exc}") from exc
            missing = [f for f in TRACE_FIELDS if f not in obj]
            if missing:
                raise TraceFormatError(
                    f"{path}:{line_no}: missing fields {missing}"
                )
            try:
                records.append(TraceRecord(**{f: obj[f] for f in TRACE_FIELDS}))
            except (TypeError, TraceFormatError) as exc:
                raise TraceFormatError(f"{path}:{line_no}: {exc}") from exc
    return records


def write_masks_jsonl(path: str | Path, records: Iterable[MaskRecord]) -> None:
    path = Path(path)
    lines = [json.dumps(asdict(r), separators=(",", ":")) for r in records]
    _atomic_write(path, "\n".join(lines) + ("\n" if lines else ""))


def read_masks_jsonl(path: str | Path) -> list[MaskRecord]:
    path = Path(path)
    if not path.is_file():
        raise TraceFormatError(f"{path}: no such masks file")
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"{path}:{line_no}: malformed record: {exc}") from exc
            try:
                obj["retained"] = tuple(int(e) for e in obj["retained"])
                records.append(MaskRecord(**obj))
            except (TypeError, KeyError) as exc:
                raise TraceFormatError(f"{path}:{line_no}: {exc}") from exc
    return records


def masks_path_for(trace_path: str | Path) -> Path:
    p = Path(trace_path)
    return p.with_name(p.stem + ".masks.jsonl")
