"""Run configuration: a sectioned key-value text file (TOML).

The loader validates every key against the module preconditions and
reports violations with the file line the key appears on, so a typo in
a long config is a one-glance fix.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ValidationError
from .policy import PolicyConfig
from .router import MoEModelSpec


@dataclass(frozen=True)
class SimKnobs:
    d_head: int = 16
    router_gain: float = 2.0
    attn_gain: float = 1.5
    expert_gain: float = 1.0


@dataclass(frozen=True)
class CostSweepConfig:
    calibration_path: str | None = None
    calibration_active_experts: int = 4
    batch_sizes: tuple[int, ...] = (8, 16, 32, 64)
    expert_counts: tuple[int, ...] = ()  # default: pool, pool/2, pool/4 ...
    seq_len: int | None = None
    speedup_band_low: float = 1.3
    speedup_band_high: float = 1.5
    saturation_trials: int = 100_000


@dataclass(frozen=True)
class RunConfig:
    spec: MoEModelSpec
    policy: PolicyConfig | None
    batch_sizes: tuple[int, ...] = (32,)
    batches_per_size: int = 1
    prefill_len: int = 6
    decode_steps: int = 10
    seed: int = 0
    sim: SimKnobs = field(default_factory=SimKnobs)
    cost: CostSweepConfig = field(default_factory=CostSweepConfig)
    out_dir: str = "runs/out"


class _Section:
    """Typed accessor over one TOML table with line-numbered errors."""

    def __init__(self, path: Path, text: str, name: str, data: dict):
        self.path = path
        self.text = text
        self.name = name
        self.data = data

    def _line_of(self, key: str) -> str:
        in_section = self.name == ""
        for i, line in enumerate(self.text.splitlines(), start=1):
            stripped = line.strip()
            if stripped.startswith("["):
                in_section = stripped == f"[{self.name}]"
                continue
            if in_section and stripped.split("=")[0].strip() == key:
                return f"{self.path}:{i}"
        return f"{self.path}:[{self.name}]"

    def fail(self, key: str, message: str) -> ValidationError:
        return ValidationError(f"{self._line_of(key)}: {self.name}.{key}: {message}")

    def annotate(self, exc: ValidationError) -> ValidationError:
        """Attach the line of the first config key a message mentions."""
        msg = str(exc)
        best: tuple[int, str] | None = None
        for key in self.data:
            idx = msg.find(key)
            if idx >= 0 and (best is None or idx < best[0]):
                best = (idx, key)
        if best is None:
            return ValidationError(f"{self.path}: [{self.name}]: {msg}")
        return ValidationError(f"{self._line_of(best[1])}: {self.name}.{best[1]}: {msg}")

    def get(self, key: str, kind: type, default=None, required: bool = False):
        if key not in self.data:
            if required:
                raise ValidationError(
                    f"{self.path}: missing required key {self.name}.{key}"
                )
            return default
        value = self.data[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
            raise self.fail(key, f"expected {kind.__name__}, got {type(value).__name__}")
        return value

    def get_int_list(self, key: str, default: tuple[int, ...]) -> tuple[int, ...]:
        if key not in self.data:
            return default
        value = self.data[key]
        if not isinstance(value, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise self.fail(key, "expected a list of integers")
        return tuple(value)


def _positive(section: _Section, key: str, value: int) -> int:
    if value < 1:
        raise section.fail(key, f"must be >= 1, got {value}")
    return value


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from exc

    def section(name: str, required: bool = False) -> _Section | None:
        if name not in data:
            if required:
                raise ValidationError(f"{path}: missing required [{name}] section")
            return None
        return _Section(path, text, name, data[name])

    model = section("model", required=True)
    try:
        spec = MoEModelSpec(
            num_layers=_positive(model, "num_layers", model.get("num_layers", int, required=True)),
            num_experts=_positive(model, "num_experts", model.get("num_experts", int, required=True)),
            top_k=_positive(model, "top_k", model.get("top_k", int, required=True)),
            d_model=_positive(model, "d_model", model.get("d_model", int, 32)),
            d_ff=_positive(model, "d_ff", model.get("d_ff", int, 64)),
            bytes_per_param=_positive(model, "bytes_per_param", model.get("bytes_per_param", int, 2)),
        )
    except ValidationError as exc:
        if str(exc).startswith(str(path)):
            raise
        raise model.annotate(exc) from exc

    policy = None
    pol = section("policy")
    if pol is not None:
        mode = pol.get("mode", str, "latency")
        try:
            policy = PolicyConfig(
                mode=mode,
                drop_count=pol.get("drop_count", int, 0),
                confidence_threshold=pol.get("confidence_threshold", float, 0.5),
                sample_threshold=pol.get("sample_threshold", int, 8),
                min_experts=pol.get("min_experts", int, None),
                freq_keep_budget=pol.get("freq_keep_budget", int, 4),
                confidence_metric=pol.get("confidence_metric", str, "top1"),
            )
            # Fail fast on a floor below the routing width.
            policy.resolved_min_experts(spec.top_k)
        except ValidationError as exc:
            if str(exc).startswith(str(path)):
                raise
            raise pol.annotate(exc) from exc

    batches = section("batches")
    if batches is not None:
        sizes = batches.get_int_list("sizes", (32,))
        for s in sizes:
            if s < 1:
                raise batches.fail("sizes", "batch sizes must be >= 1")
        count = _positive(batches, "count", batches.get("count", int, 1))
        prefill = _positive(batches, "prefill_len", batches.get("prefill_len", int, 6))
        decode = batches.get("decode_steps", int, 10)
        if decode < 0:
            raise batches.fail("decode_steps", "must be >= 0")
        seed = batches.get("seed", int, 0)
    else:
        sizes, count, prefill, decode, seed = (32,), 1, 6, 10, 0

    sim = section("sim")
    knobs = SimKnobs()
    if sim is not None:
        knobs = SimKnobs(
            d_head=_positive(sim, "d_head", sim.get("d_head", int, 16)),
            router_gain=sim.get("router_gain", float, 2.0),
            attn_gain=sim.get("attn_gain", float, 1.5),
            expert_gain=sim.get("expert_gain", float, 1.0),
        )

    cm = section("costmodel")
    cost = CostSweepConfig()
    if cm is not None:
        counts = cm.get_int_list("expert_counts", ())
        for e in counts:
            if not (1 <= e <= spec.num_experts):
                raise cm.fail("expert_counts", f"counts must be in [1, {spec.num_experts}]")
        cost = CostSweepConfig(
            calibration_path=cm.get("calibration", str, None),
            calibration_active_experts=_positive(
                cm, "calibration_active_experts",
                cm.get("calibration_active_experts", int, 4),
            ),
            batch_sizes=cm.get_int_list("batch_sizes", (8, 16, 32, 64)),
            expert_counts=counts,
            seq_len=cm.get("seq_len", int, None),
            speedup_band_low=cm.get("speedup_band_low", float, 1.3),
            speedup_band_high=cm.get("speedup_band_high", float, 1.5),
            saturation_trials=_positive(
                cm, "saturation_trials", cm.get("saturation_trials", int, 100_000)
            ),
        )

    run = section("run")
    out_dir = "runs/out"
    if run is not None:
        out_dir = run.get("out_dir", str, out_dir)

    return RunConfig(
        spec=spec,
        policy=policy,
        batch_sizes=sizes,
        batches_per_size=count,
        prefill_len=prefill,
        decode_steps=decode,
        seed=seed,
        sim=knobs,
        cost=cost,
        out_dir=out_dir,
    )


def config_digest(path: str | Path, seed: int) -> str:
    """Stable id for (config contents, seed); prefixes every output."""
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    h.update(f"|seed={seed}".encode())
    return h.hexdigest()[:12]
