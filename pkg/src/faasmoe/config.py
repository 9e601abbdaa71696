"""Platform, model, workload and tuner configuration.

All configuration lives in YAML files (see ``configs/`` in the repository).
Every loader accepts a path or a plain mapping so tests can build
instances inline.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml


class ConfigError(ValueError):
    """Raised when a configuration file is missing, malformed or inconsistent."""


# AWS Lambda menu used on the reference testbed (MB).
LAMBDA_MEMORY_MB = (128, 768, 960, 1152, 1344, 1536, 1728, 1920, 2112,
                    2304, 2496, 2688, 2880, 3072)


def scaled_unit_compute(memory_mb, base_s: float = 0.002,
                        base_mb: float = 1769.0, exponent: float = 0.8):
    """Seconds per token for each memory size; one vCPU per ``base_mb``."""
    return [round(base_s * (base_mb / m) ** exponent, 9) for m in memory_mb]


@dataclass(frozen=True)
class PlatformProfile:
    storage_bandwidth: float          # MB/s, function <-> external storage
    function_bandwidth: float         # MB/s, function -> function
    warm_start_time: float            # s
    storage_access_delay: float       # s per storage access
    payload_limit: float              # MB
    memory_options: tuple             # MB, strictly increasing
    unit_compute_time: tuple          # s/token, strictly decreasing
    max_replicas: int = 8
    billing_granularity_s: float = 0.001

    def __post_init__(self):
        object.__setattr__(self, "memory_options", tuple(float(m) for m in self.memory_options))
        object.__setattr__(self, "unit_compute_time", tuple(float(u) for u in self.unit_compute_time))
        mem, u = self.memory_options, self.unit_compute_time
        if not mem or len(mem) != len(u):
            raise ConfigError("memory_options and unit_compute_time must be non-empty and equal length")
        if any(b <= a for a, b in zip(mem, mem[1:])):
            raise ConfigError("memory_options must be strictly increasing")
        if any(b >= a for a, b in zip(u, u[1:])):
            raise ConfigError("unit_compute_time must be strictly decreasing")
        if min(u) <= 0 or mem[0] <= 0:
            raise ConfigError("memory sizes and unit compute times must be positive")
        for name in ("storage_bandwidth", "function_bandwidth", "warm_start_time",
                     "storage_access_delay", "payload_limit"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive")
        if int(self.max_replicas) < 1:
            raise ConfigError("max_replicas must be >= 1")
        if self.billing_granularity_s < 0:
            raise ConfigError("billing_granularity_s must be >= 0")

    @property
    def n_memory(self) -> int:
        return len(self.memory_options)


@dataclass(frozen=True)
class LayerSpec:
    param_mb: tuple                   # per expert
    intermediate_mb: tuple            # per expert
    nonmoe_compute_time: float        # s, previous non-MoE layer + gate
    nonmoe_load_time: float           # s, start + parameter download of next non-MoE layer

    def __post_init__(self):
        object.__setattr__(self, "param_mb", tuple(float(p) for p in self.param_mb))
        object.__setattr__(self, "intermediate_mb", tuple(float(p) for p in self.intermediate_mb))
        if len(self.param_mb) != len(self.intermediate_mb) or not self.param_mb:
            raise ConfigError("each layer needs >= 1 expert with param and intermediate sizes")
        if min(self.param_mb + self.intermediate_mb) < 0:
            raise ConfigError("sizes must be non-negative")
        if self.nonmoe_compute_time < 0 or self.nonmoe_load_time < 0:
            raise ConfigError("times must be non-negative")

    @property
    def n_experts(self) -> int:
        return len(self.param_mb)


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    head_time: float
    tail_time: float
    token_in_mb: float
    token_out_mb: float
    latency_limit: float

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if min(self.head_time, self.tail_time, self.token_in_mb, self.token_out_mb) < 0:
            raise ConfigError("model times and sizes must be non-negative")
        floor = self.head_time + self.tail_time + sum(l.nonmoe_compute_time for l in self.layers)
        if not self.latency_limit > floor:
            raise ConfigError(
                f"latency_limit {self.latency_limit} must exceed head+tail+non-MoE time {floor}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def experts_per_layer(self) -> list[int]:
        return [l.n_experts for l in self.layers]

    def latency_budget(self) -> float:
        """Time left for the MoE layers once fixed non-MoE work is paid."""
        return self.latency_limit - self.head_time - self.tail_time - sum(
            l.nonmoe_compute_time for l in self.layers)


@dataclass(frozen=True)
class WorkloadConfig:
    vocab_size: int = 1000
    seq_len: int = 128
    batch_tokens: int = 10240
    profile_sequences: int = 100
    n_batches: int = 4
    n_topics: int = 8
    token_zipf: float = 1.1
    topic_strength: float = 0.5
    skew: float = 1.0
    top_k: int = 1
    attention_noise: float = 0.1
    f3_buckets: int = 4
    position_buckets: int = 1
    swap_rate: float = 0.5
    route_noise: float = 0.05
    batch_topic_concentration: float = 0.1

    def __post_init__(self):
        if self.vocab_size < 1 or self.seq_len < 1:
            raise ConfigError("vocab_size and seq_len must be >= 1")
        if self.batch_tokens < 0 or self.profile_sequences < 0 or self.n_batches < 1:
            raise ConfigError("batch_tokens/profile_sequences must be >= 0, n_batches >= 1")
        if self.top_k < 1 or self.skew < 0 or not 0 <= self.attention_noise <= 1:
            raise ConfigError("invalid top_k, skew or attention_noise")
        if not 0 <= self.topic_strength <= 1 or self.n_topics < 1:
            raise ConfigError("invalid topic settings")
        if not 0 <= self.swap_rate <= 1 or not 0 <= self.route_noise <= 1:
            raise ConfigError("swap_rate and route_noise must lie in [0, 1]")
        if self.f3_buckets < 1 or not 1 <= self.position_buckets <= self.seq_len:
            raise ConfigError("invalid bucket counts")
        if self.batch_topic_concentration <= 0:
            raise ConfigError("batch_topic_concentration must be positive")


@dataclass(frozen=True)
class TunerConfig:
    """Constants of the tuning loop.  None of these are fixed by the method
    itself; the defaults are desk-scale choices."""
    Q: int = 1000
    mu: float = 0.5
    alpha: float = 2.0
    rho: float = 0.5
    rho1: float = 0.25
    rho2: float = 0.15
    rho3: float = 0.05
    lam: int = 5
    zeta: float = 0.01
    epsilon0: float = 0.2
    max_iterations: int = 100
    batches: int = 4                      # J simulated batches per iteration
    per_event_feedback: bool = False

    def __post_init__(self):
        if not self.rho > self.rho1 > self.rho2 > self.rho3 > 0:
            raise ConfigError("require rho > rho1 > rho2 > rho3 > 0")
        if not 0 < self.mu < 1 or self.Q < 1 or self.lam < 1 or self.alpha <= 0:
            raise ConfigError("require 0 < mu < 1, Q >= 1, lam >= 1, alpha > 0")
        if self.epsilon0 < 0 or self.zeta < 0 or self.max_iterations < 1 or self.batches < 1:
            raise ConfigError("invalid epsilon0, zeta, max_iterations or batches")


@dataclass(frozen=True)
class PlannerConfig:
    time_budget_s: float = 60.0
    beta_max: int | None = None
    block_multiplier: str = "blocks"      # or "beta": multiplier exactly as printed
    printed_direct_constraint: bool = False
    worst_layer: str = "highest"          # or "lowest": the printed argmin

    def __post_init__(self):
        if self.block_multiplier not in ("blocks", "beta"):
            raise ConfigError("block_multiplier must be 'blocks' or 'beta'")
        if self.worst_layer not in ("highest", "lowest"):
            raise ConfigError("worst_layer must be 'highest' or 'lowest'")
        if self.beta_max is not None and self.beta_max < 1:
            raise ConfigError("beta_max must be >= 1")


def canonical_profile() -> PlatformProfile:
    """Desk profile: Lambda memory menu, S3-like storage, 6 MB payload."""
    return PlatformProfile(
        storage_bandwidth=80.0,
        function_bandwidth=50.0,
        warm_start_time=0.1,
        storage_access_delay=0.02,
        payload_limit=6.0,
        memory_options=LAMBDA_MEMORY_MB,
        unit_compute_time=scaled_unit_compute(LAMBDA_MEMORY_MB),
        max_replicas=8,
        billing_granularity_s=0.001,
    )


def canonical_model(n_layers: int = 12, n_experts: int = 4,
                    latency_limit: float = 120.0) -> ModelSpec:
    """A 12-layer, 4-expert decoder with 1600-wide fp32 activations."""
    layer = LayerSpec(param_mb=[82.0] * n_experts, intermediate_mb=[600.0] * n_experts,
                      nonmoe_compute_time=0.4, nonmoe_load_time=1.2)
    return ModelSpec(layers=[layer] * n_layers, head_time=1.5, tail_time=1.5,
                     token_in_mb=0.0061, token_out_mb=0.0061, latency_limit=latency_limit)


# ---------------------------------------------------------------- loading

def _read(source) -> dict:
    if isinstance(source, Mapping):
        return dict(source)
    path = Path(source)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _build(cls, data: Mapping, where: str):
    known = {f.name for f in fields(cls)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_profile(source) -> PlatformProfile:
    data = _read(source)
    data = data.get("platform", data)
    if "unit_compute_time" not in data and "memory_options" in data:
        data = dict(data, unit_compute_time=scaled_unit_compute(data["memory_options"]))
    return _build(PlatformProfile, data, "platform")


def load_model(source) -> ModelSpec:
    """Load a model spec.

    Layers may be listed explicitly under ``layers`` or generated from
    ``n_layers`` plus a ``layer_defaults`` block with scalar per-expert
    sizes and an ``n_experts`` count.
    """
    data = dict(_read(source))
    data = dict(data.get("model", data))
    layers = data.pop("layers", None)
    defaults = data.pop("layer_defaults", None)
    n_layers = data.pop("n_layers", None)
    if layers is None:
        if defaults is None or n_layers is None:
            raise ConfigError("model: give either 'layers' or 'n_layers' + 'layer_defaults'")
        layers = [defaults] * int(n_layers)
    built = []
    for idx, raw in enumerate(layers):
        raw = dict(raw)
        n = raw.pop("n_experts", None)
        for key in ("param_mb", "intermediate_mb"):
            if key in raw and not isinstance(raw[key], (list, tuple)):
                if n is None:
                    raise ConfigError(f"layer {idx}: scalar {key} needs n_experts")
                raw[key] = [raw[key]] * int(n)
        built.append(_build(LayerSpec, raw, f"layer {idx}"))
    data["layers"] = built
    return _build(ModelSpec, data, "model")


def load_workload(source) -> tuple[WorkloadConfig, TunerConfig, PlannerConfig]:
    data = _read(source)
    unknown = set(data) - {"workload", "tuner", "planner"}
    if unknown:
        raise ConfigError(f"workload file: unknown sections {sorted(unknown)}")
    return (_build(WorkloadConfig, data.get("workload") or {}, "workload"),
            _build(TunerConfig, data.get("tuner") or {}, "tuner"),
            _build(PlannerConfig, data.get("planner") or {}, "planner"))


def config_hash(*objs: Any) -> str:
    """Short stable digest of dataclass configs, embedded in every output."""
    h = hashlib.sha256()
    for obj in objs:
        payload = asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj
        h.update(repr(payload).encode())
    return h.hexdigest()[:16]


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def finite(x: float) -> bool:
    return not (math.isinf(x) or math.isnan(x))
