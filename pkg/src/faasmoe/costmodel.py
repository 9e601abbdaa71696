"""Analytical billed-cost and latency model of an MoE layer on FaaS.

Three scatter-gather methods are modelled:

1. pipelined indirect transfer through external storage (minibatches of
   at most ``beta`` tokens),
2. plain indirect transfer through external storage,
3. direct function-to-function invocation, bounded by the payload limit.

Sizes are MB, bandwidths MB/s, times seconds and cost GB-seconds
(1 GB = 1024 MB).  Every function here is pure.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .config import ModelSpec, PlatformProfile, ceil_div

PIPELINED, INDIRECT, DIRECT = 1, 2, 3
METHODS = (PIPELINED, INDIRECT, DIRECT)
METHOD_NAMES = {PIPELINED: "pipelined-indirect", INDIRECT: "indirect", DIRECT: "direct"}

# Absolute slack when comparing a latency sum to the limit; shared by the
# planner, the oracles and check_feasibility so they agree on borderlines.
LATENCY_TOL = 1e-9


class InfeasibleError(ValueError):
    """A configuration that the platform cannot execute (e.g. payload)."""


@dataclass(frozen=True)
class CostOptions:
    block_multiplier: str = "blocks"         # "beta" reproduces the printed multiplier
    printed_direct_constraint: bool = False  # literal algebraic payload guard


DEFAULT_OPTIONS = CostOptions()


@dataclass(frozen=True)
class ExpertDemand:
    tokens: tuple            # tokens[layer][expert] -> int

    def __post_init__(self):
        rows = tuple(tuple(int(d) for d in row) for row in self.tokens)
        if any(d < 0 for row in rows for d in row):
            raise ValueError("token counts must be non-negative")
        object.__setattr__(self, "tokens", rows)

    @property
    def activated(self) -> tuple:
        return tuple(tuple(d > 0 for d in row) for row in self.tokens)

    @property
    def shape(self) -> tuple:
        return tuple(len(row) for row in self.tokens)

    def layer_total(self, layer: int) -> int:
        return sum(self.tokens[layer])

    @classmethod
    def zeros(cls, experts_per_layer: Sequence[int]) -> "ExpertDemand":
        return cls(tuple((0,) * n for n in experts_per_layer))


@dataclass(frozen=True)
class DeploymentPlan:
    method: tuple            # per layer, 1..3
    memory: tuple            # memory[layer][expert] -> index into memory_options
    replicas: tuple          # replicas[layer][expert] -> 1..G
    beta: int = 1

    def __post_init__(self):
        object.__setattr__(self, "method", tuple(int(a) for a in self.method))
        object.__setattr__(self, "memory", tuple(tuple(int(j) for j in row) for row in self.memory))
        object.__setattr__(self, "replicas", tuple(tuple(int(g) for g in row) for row in self.replicas))
        object.__setattr__(self, "beta", int(self.beta))

    @property
    def n_layers(self) -> int:
        return len(self.method)

    def to_dict(self) -> dict:
        return {"beta": self.beta,
                "layers": [{"method": a, "memory_index": list(m), "replicas": list(g)}
                           for a, m, g in zip(self.method, self.memory, self.replicas)]}

    @classmethod
    def from_dict(cls, data: dict) -> "DeploymentPlan":
        layers = data["layers"]
        return cls(method=[l["method"] for l in layers],
                   memory=[l["memory_index"] for l in layers],
                   replicas=[l["replicas"] for l in layers],
                   beta=data["beta"])


@dataclass(frozen=True)
class LayerCostBreakdown:
    layer: int
    method: int
    memory_mb: tuple
    replicas: tuple
    replica_exec_time: tuple      # per expert, 0 when inactive
    total_exec_time: tuple        # replicas * replica time, 0 when inactive
    expert_cost: tuple            # GB-s per expert
    billed_cost: float            # GB-s, sum of expert_cost
    latency: float
    stage12_time: float
    stage3_time: float


@dataclass(frozen=True)
class Violation:
    constraint: str               # memory | latency | beta | payload | structure
    layer: int | None
    expert: int | None
    detail: str


@dataclass
class FeasibilityReport:
    violations: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not self.violations

    def by_constraint(self, name: str) -> list:
        return [v for v in self.violations if v.constraint == name]


# ------------------------------------------------------------ primitives

def tokens_per_replica(d: int, g: int, max_replicas: int | None = None) -> int:
    """Tokens handled by the most loaded replica, ``ceil(d / g)``."""
    if g < 1 or (max_replicas is not None and g > max_replicas):
        raise ValueError(f"replica count {g} outside [1, {max_replicas}]")
    if d < 0:
        raise ValueError("token count must be non-negative")
    return ceil_div(d, g)


def head_time(param_mb: float, profile: PlatformProfile) -> float:
    """Warm start plus one storage access plus the parameter download."""
    return param_mb / profile.storage_bandwidth + profile.storage_access_delay + profile.warm_start_time


def token_compute_time(demand: ExpertDemand, plan: DeploymentPlan,
                       profile: PlatformProfile, layer: int, expert: int) -> float:
    active = demand.tokens[layer][expert] > 0
    j = plan.memory[layer][expert]
    if not 0 <= j < profile.n_memory:
        raise IndexError(f"memory index {j} out of range")
    return profile.unit_compute_time[j] if active else 0.0


def replica_time(method: int, r: int, head: float, t_cal: float, beta: int,
                 profile: PlatformProfile, model: ModelSpec,
                 options: CostOptions = DEFAULT_OPTIONS) -> float:
    """Execution time of one replica handling ``r`` tokens.

    ``t_cal`` is the per-token compute time (0 for an inactive expert).
    The compiled kernels repeat the pipelined expression term by term, so
    keep the two in sync.
    """
    bs = profile.storage_bandwidth
    tdl = profile.storage_access_delay
    if method == PIPELINED:
        if beta < 1:
            raise ValueError("pipeline degree must be >= 1")
        n = ceil_div(r, beta)
        do_bs = model.token_out_mb / bs
        din_bs = model.token_in_mb / bs
        t_nblk = tdl + n * do_bs
        t_blk = tdl + beta * max(din_bs + t_cal, do_bs)
        n_blocks = beta if options.block_multiplier == "beta" else n
        return head + t_nblk + n_blocks * t_blk
    if method == INDIRECT:
        return head + 2 * tdl + r * ((model.token_in_mb + model.token_out_mb) / bs + t_cal)
    if method == DIRECT:
        return head + r * (model.token_out_mb / profile.function_bandwidth + t_cal)
    raise ValueError(f"unknown method {method}")


def payload_violated(method: int, r: int, profile: PlatformProfile, model: ModelSpec,
                     options: CostOptions = DEFAULT_OPTIONS) -> bool:
    if options.printed_direct_constraint:
        return (method - 3) * (r * model.token_in_mb - profile.payload_limit) > 0
    return method == DIRECT and (r * model.token_in_mb > profile.payload_limit
                                 or r * model.token_out_mb > profile.payload_limit)


def memory_required(layer: int, expert: int, r: int, model: ModelSpec) -> float:
    spec = model.layers[layer]
    return spec.param_mb[expert] + spec.intermediate_mb[expert] + r * (model.token_in_mb + model.token_out_mb)


def replica_exec_time(method: int, layer: int, expert: int, r: int, plan: DeploymentPlan,
                      profile: PlatformProfile, model: ModelSpec,
                      options: CostOptions = DEFAULT_OPTIONS) -> float:
    if not 0 <= layer < model.n_layers or not 0 <= expert < model.layers[layer].n_experts:
        raise IndexError(f"no expert ({layer}, {expert})")
    if method == DIRECT and payload_violated(DIRECT, r, profile, model):
        raise InfeasibleError(
            f"direct transfer of {r} tokens exceeds the {profile.payload_limit} MB payload "
            f"at layer {layer}, expert {expert}")
    j = plan.memory[layer][expert]
    if not 0 <= j < profile.n_memory:
        raise IndexError(f"memory index {j} out of range")
    t_cal = profile.unit_compute_time[j] if r > 0 else 0.0
    head = head_time(model.layers[layer].param_mb[expert], profile)
    return replica_time(method, r, head, t_cal, plan.beta, profile, model, options)


# ------------------------------------------------------------- per layer

def layer_exec_and_cost(method: int, layer: int, demand: ExpertDemand, plan: DeploymentPlan,
                        profile: PlatformProfile, model: ModelSpec,
                        options: CostOptions = DEFAULT_OPTIONS) -> LayerCostBreakdown:
    spec = model.layers[layer]
    G = profile.max_replicas
    treps, totals, costs, mems, reps = [], [], [], [], []
    active_treps, active_r = [], []
    for i in range(spec.n_experts):
        d = demand.tokens[layer][i]
        g = plan.replicas[layer][i]
        r = tokens_per_replica(d, g, G)
        mem = profile.memory_options[plan.memory[layer][i]]
        mems.append(mem)
        reps.append(g)
        if d > 0:
            trep = replica_exec_time(method, layer, i, r, plan, profile, model, options)
            total = g * trep
            cost = total * (mem / 1024.0)
            active_treps.append(trep)
            active_r.append(r)
        else:
            trep = total = cost = 0.0
        treps.append(trep)
        totals.append(total)
        costs.append(cost)
    billed = 0.0
    for c in costs:
        billed += c
    s12, s3, lat = _latency_terms(method, layer, demand, active_treps, active_r, profile, model)
    return LayerCostBreakdown(layer=layer, method=method, memory_mb=tuple(mems), replicas=tuple(reps),
                              replica_exec_time=tuple(treps), total_exec_time=tuple(totals),
                              expert_cost=tuple(costs), billed_cost=billed, latency=lat,
                              stage12_time=s12, stage3_time=s3)


def _latency_terms(method, layer, demand, active_treps, active_r, profile, model):
    t_load = model.layers[layer].nonmoe_load_time
    slowest = max(active_treps, default=0.0)
    if method in (PIPELINED, INDIRECT):
        s3 = indirect_gather_time(demand.layer_total(layer), profile, model)
        return slowest, s3, max(slowest, t_load) + s3
    scatter = max(active_r, default=0) * model.token_in_mb / profile.function_bandwidth
    return slowest, 0.0, scatter + slowest + t_load


def indirect_gather_time(total_tokens: int, profile: PlatformProfile, model: ModelSpec) -> float:
    """Stage 3: the next non-MoE function downloads every processed token."""
    return profile.storage_access_delay + total_tokens * model.token_out_mb / profile.storage_bandwidth


def direct_layer_latency(max_r: int, slowest: float, layer: int,
                         profile: PlatformProfile, model: ModelSpec) -> float:
    return max_r * model.token_in_mb / profile.function_bandwidth + slowest + model.layers[layer].nonmoe_load_time


def indirect_layer_latency(slowest: float, gather: float, layer: int, model: ModelSpec) -> float:
    return max(slowest, model.layers[layer].nonmoe_load_time) + gather


def layer_latency(method: int, layer: int, demand: ExpertDemand, plan: DeploymentPlan,
                  profile: PlatformProfile, model: ModelSpec,
                  options: CostOptions = DEFAULT_OPTIONS) -> float:
    return layer_exec_and_cost(method, layer, demand, plan, profile, model, options).latency


def end_to_end_latency(plan: DeploymentPlan, demand: ExpertDemand, profile: PlatformProfile,
                       model: ModelSpec, options: CostOptions = DEFAULT_OPTIONS,
                       layer_latencies: Sequence[float] | None = None) -> float:
    if layer_latencies is None:
        layer_latencies = [layer_latency(plan.method[e], e, demand, plan, profile, model, options)
                           for e in range(model.n_layers)]
    total = model.head_time + model.tail_time
    for e, lat in enumerate(layer_latencies):
        total += lat + model.layers[e].nonmoe_compute_time
    return total


def evaluate_plan(plan: DeploymentPlan, demand: ExpertDemand, profile: PlatformProfile,
                  model: ModelSpec, options: CostOptions = DEFAULT_OPTIONS):
    """Per-layer breakdowns, total billed cost and end-to-end latency."""
    rows = [layer_exec_and_cost(plan.method[e], e, demand, plan, profile, model, options)
            for e in range(model.n_layers)]
    cost = 0.0
    for row in rows:
        cost += row.billed_cost
    e2e = end_to_end_latency(plan, demand, profile, model, options, [r.latency for r in rows])
    return rows, cost, e2e


# ----------------------------------------------------------- feasibility

def structure_violations(plan: DeploymentPlan, profile: PlatformProfile,
                         model: ModelSpec) -> list:
    out = []
    if plan.n_layers != model.n_layers or len(plan.memory) != model.n_layers \
            or len(plan.replicas) != model.n_layers:
        return [Violation("structure", None, None, "plan does not cover every layer exactly once")]
    for e, spec in enumerate(model.layers):
        if plan.method[e] not in METHODS:
            out.append(Violation("structure", e, None, f"unknown method {plan.method[e]}"))
        if len(plan.memory[e]) != spec.n_experts or len(plan.replicas[e]) != spec.n_experts:
            out.append(Violation("structure", e, None, "expert count mismatch"))
            continue
        for i in range(spec.n_experts):
            if not 0 <= plan.memory[e][i] < profile.n_memory:
                out.append(Violation("structure", e, i, f"memory index {plan.memory[e][i]} invalid"))
            if not 1 <= plan.replicas[e][i] <= profile.max_replicas:
                out.append(Violation("structure", e, i, f"replica count {plan.replicas[e][i]} invalid"))
    return out


def check_feasibility(plan: DeploymentPlan, demand: ExpertDemand, profile: PlatformProfile,
                      model: ModelSpec, options: CostOptions = DEFAULT_OPTIONS) -> FeasibilityReport:
    report = FeasibilityReport(structure_violations(plan, profile, model))
    if plan.beta < 1:
        report.violations.append(Violation("beta", None, None, f"beta={plan.beta} < 1"))
    if report.violations:
        return report
    max_r = 0
    payload_bad = False
    for e, spec in enumerate(model.layers):
        for i in range(spec.n_experts):
            r = tokens_per_replica(demand.tokens[e][i], plan.replicas[e][i], profile.max_replicas)
            max_r = max(max_r, r)
            need = memory_required(e, i, r, model)
            have = profile.memory_options[plan.memory[e][i]]
            if need > have:
                report.violations.append(Violation("memory", e, i, f"needs {need:.3f} MB > {have:.0f} MB"))
            if payload_violated(plan.method[e], r, profile, model, options):
                payload_bad = True
                report.violations.append(Violation(
                    "payload", e, i, f"{r} tokens x {model.token_in_mb} MB vs {profile.payload_limit} MB"))
    if PIPELINED in plan.method and plan.beta > max(1, max_r):
        report.violations.append(Violation("beta", None, None, f"beta={plan.beta} > max tokens/replica {max_r}"))
    if not payload_bad or options.printed_direct_constraint:
        try:
            e2e = end_to_end_latency(plan, demand, profile, model, options)
        except InfeasibleError:
            e2e = float("inf")
        if e2e > model.latency_limit + LATENCY_TOL:
            report.violations.append(Violation("latency", None, None,
                                               f"{e2e:.4f} s > limit {model.latency_limit} s"))
    return report


# -------------------------------------------------------------------- CSV

BREAKDOWN_HEADER = ("layer", "method", "expert", "memory_MB", "replicas", "t_rep_s", "cost_GBs", "latency_s")


def breakdown_rows(rows: Iterable[LayerCostBreakdown]):
    for b in rows:
        for i in range(len(b.memory_mb)):
            yield (b.layer, b.method, i, f"{b.memory_mb[i]:.0f}", b.replicas[i],
                   f"{b.replica_exec_time[i]:.9f}", f"{b.expert_cost[i]:.9f}", f"{b.latency:.9f}")


def write_breakdown_csv(path, rows: Iterable[LayerCostBreakdown], header_comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(BREAKDOWN_HEADER)
        w.writerows(breakdown_rows(rows))


# ---------------------------------------------------------------- plan files
#
#   beta 4
#   layer 0 method 2 memory 3,3,1,0 replicas 2,1,1,1

def format_plan(plan: DeploymentPlan, header_comment: str | None = None) -> str:
    lines = [f"# {header_comment}"] if header_comment else []
    lines.append(f"beta {plan.beta}")
    for e, (a, m, g) in enumerate(zip(plan.method, plan.memory, plan.replicas)):
        lines.append(f"layer {e} method {a} memory {','.join(map(str, m))} "
                     f"replicas {','.join(map(str, g))}")
    return "\n".join(lines) + "\n"


def parse_plan(text: str) -> DeploymentPlan:
    beta, layers = None, {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "beta" and len(parts) == 2:
                beta = int(parts[1])
            elif parts[0] == "layer" and len(parts) == 8 and parts[2::2] == ["method", "memory", "replicas"]:
                layers[int(parts[1])] = (int(parts[3]), [int(x) for x in parts[5].split(",")],
                                         [int(x) for x in parts[7].split(",")])
            else:
                raise ValueError(line)
        except ValueError as exc:
            raise ValueError(f"plan line {n}: cannot parse {raw!r}") from exc
    if beta is None or sorted(layers) != list(range(len(layers))) or not layers:
        raise ValueError("plan needs a beta line and layers numbered from 0")
    rows = [layers[e] for e in range(len(layers))]
    for a, m, g in rows:
        if a not in METHODS or len(m) != len(g):
            raise ValueError("plan has an unknown method or mismatched expert lists")
    return DeploymentPlan([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows], beta)
