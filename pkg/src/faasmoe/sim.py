"""Discrete-event simulator of an MoE deployment on a serverless platform.

Every expert replica is one warm function invocation: it starts, pulls
its parameters from external storage, exchanges tokens through storage
(methods 1 and 2) or by direct invocation (method 3), and is billed for
its wall-clock residency rounded up to the billing granularity.

Replicas of an expert receive equal shards of ``ceil(d / g)`` tokens,
the last shard padded, and the pipelined method always moves full
minibatches.  Under those rules and without noise the simulated times
equal the analytical model up to floating-point summation order.
"""
from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .config import ModelSpec, PlatformProfile, ceil_div
from .costmodel import (DEFAULT_OPTIONS, DIRECT, INDIRECT, PIPELINED, CostOptions,
                        DeploymentPlan, ExpertDemand, memory_required, payload_violated)

EVENT_KINDS = ("FunctionStart", "ModelDownload", "StorageDownload", "StorageUpload",
               "DirectTransfer", "Compute", "MemoryOverflow", "PayloadReject")


@dataclass(frozen=True, order=True)
class SimEvent:
    t: float
    function: str
    seq: int
    kind: str = field(compare=False)
    mb: float = field(compare=False, default=0.0)
    duration: float = field(compare=False, default=0.0)


@dataclass(frozen=True)
class MemoryOverflow:
    layer: int
    expert: int
    required_mb: float
    configured_mb: float


@dataclass
class SimReport:
    layer_costs: list
    layer_latencies: list
    e2e_latency: float
    real_tokens: ExpertDemand
    memory_overflows: list
    payload_rejects: list          # layers that fell back from direct to indirect
    executed_methods: list
    invocations: int
    n_tokens: int
    events: list = field(default_factory=list)

    @property
    def cost(self) -> float:
        total = 0.0
        for c in self.layer_costs:
            total += c
        return total

    @property
    def throughput(self) -> float:
        return self.n_tokens / self.e2e_latency if self.e2e_latency > 0 else 0.0


class _Trace:
    """Per-function event lists, merged into one time-ordered stream at the end."""

    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.lists: dict = {}

    def add(self, fn: str, t: float, kind: str, mb: float = 0.0, duration: float = 0.0):
        if self.enabled:
            lst = self.lists.setdefault(fn, [])
            lst.append(SimEvent(t, fn, len(lst), kind, mb, duration))

    def merged(self) -> list:
        return list(heapq.merge(*self.lists.values()))


class _Noise:
    def __init__(self, sigma: float, seed: int):
        self.sigma = sigma
        self.rng = np.random.default_rng(seed) if sigma > 0 else None

    def factor(self) -> float:
        return float(np.exp(self.sigma * self.rng.standard_normal())) if self.rng else 1.0


def _billed(duration: float, granularity: float) -> float:
    if granularity <= 0:
        return duration
    return math.ceil(duration / granularity - 1e-9) * granularity


def _run_replica(trace, fn, start, method, r, beta, tcal, param_mb, profile, model, opts, f):
    """Execute one replica from ``start``; returns its finishing time."""
    bs, tdl = profile.storage_bandwidth / f, profile.storage_access_delay * f
    din, dout = model.token_in_mb, model.token_out_mb
    t = start
    trace.add(fn, t, "FunctionStart", duration=profile.warm_start_time)
    t += profile.warm_start_time
    dl = tdl + param_mb / bs
    trace.add(fn, t, "ModelDownload", param_mb, dl)
    t += dl
    if method == PIPELINED:
        n = ceil_div(r, beta)
        blocks = beta if opts.block_multiplier == "beta" else n
        slot = max(din / bs + tcal, dout / bs)
        for b in range(blocks):
            if trace.enabled:
                trace.add(fn, t, "StorageDownload", 0.0, tdl)
                t0, end = t + tdl, t + (tdl + beta * slot)
                for s in range(beta):
                    ts = t0 + s * slot
                    trace.add(fn, ts, "StorageDownload", din, din / bs)
                    trace.add(fn, ts + din / bs, "Compute", 0.0, tcal)
                    # result upload overlaps the next slot's download
                    up = min(ts + din / bs + tcal, t0 + (s + 1) * slot if s + 1 < beta else end)
                    trace.add(fn, up, "StorageUpload", dout, dout / bs)
            t += tdl + beta * slot
        flush = tdl + n * dout / bs
        trace.add(fn, t, "StorageUpload", n * dout, flush)
        t += flush
    elif method == INDIRECT:
        down = tdl + r * din / bs
        trace.add(fn, t, "StorageDownload", r * din, down)
        t += down
        trace.add(fn, t, "Compute", 0.0, r * tcal)
        t += r * tcal
        up = tdl + r * dout / bs
        trace.add(fn, t, "StorageUpload", r * dout, up)
        t += up
    else:
        trace.add(fn, t, "Compute", 0.0, r * tcal)
        t += r * tcal
        bf = profile.function_bandwidth / f
        trace.add(fn, t, "DirectTransfer", r * dout, r * dout / bf)
        t += r * dout / bf
    return t


def simulate(plan: DeploymentPlan, real: ExpertDemand, profile: PlatformProfile, model: ModelSpec,
             options: CostOptions = DEFAULT_OPTIONS, noise_sigma: float = 0.0, seed: int = 0,
             record_events: bool = True, n_tokens: int | None = None) -> SimReport:
    """Run one batch with true per-expert token counts ``real``."""
    if real.shape != tuple(model.experts_per_layer):
        raise ValueError("demand does not match the model topology")
    noise = _Noise(noise_sigma, seed)
    trace = _Trace(record_events)
    gran = profile.billing_granularity_s
    clock = model.head_time
    trace.add("head", 0.0, "Compute", 0.0, model.head_time)
    costs, lats, overflows, rejects, executed = [], [], [], [], []
    invocations = 0
    for e, spec in enumerate(model.layers):
        row = real.tokens[e]
        method = plan.method[e]
        gate = f"nonmoe{e}"
        trace.add(gate, clock, "Compute", 0.0, spec.nonmoe_compute_time)
        s = clock + spec.nonmoe_compute_time
        rs = [ceil_div(d, g) for d, g in zip(row, plan.replicas[e])]
        if method == DIRECT and any(payload_violated(DIRECT, r, profile, model) for r in rs):
            trace.add(gate, s, "PayloadReject", max(rs) * model.token_in_mb)
            rejects.append(e)
            method = INDIRECT
        executed.append(method)
        start = s
        if method == DIRECT:
            scatter = 0.0
            for i, (d, r, g) in enumerate(zip(row, rs, plan.replicas[e])):
                if d > 0:
                    dur = r * model.token_in_mb / (profile.function_bandwidth / noise.factor())
                    for k in range(g):
                        trace.add(gate, s, "DirectTransfer", r * model.token_in_mb, dur)
                    scatter = max(scatter, dur)
            start = s + scatter
        layer_cost, slowest = 0.0, 0.0
        for i, (d, r, g) in enumerate(zip(row, rs, plan.replicas[e])):
            if d == 0:
                continue
            j = plan.memory[e][i]
            mem = profile.memory_options[j]
            need = memory_required(e, i, r, model)
            if need > mem:
                overflows.append(MemoryOverflow(e, i, need, mem))
                trace.add(f"L{e}E{i}R0", start, "MemoryOverflow", need)
            f = noise.factor()
            finish = None
            for k in range(g):
                fn = f"L{e}E{i}R{k}"
                if k == 0 or record_events:
                    finish = _run_replica(trace, fn, start, method, r, plan.beta,
                                          profile.unit_compute_time[j], spec.param_mb[i],
                                          profile, model, options, f)
                layer_cost += _billed(finish - start, gran) * (mem / 1024.0)
                invocations += 1
            slowest = max(slowest, finish - start)
        nxt = f"nonmoe{e + 1}"
        if method == DIRECT:
            trace.add(nxt, start + slowest, "FunctionStart", duration=spec.nonmoe_load_time)
            end = start + slowest + spec.nonmoe_load_time
        else:
            trace.add(nxt, s, "FunctionStart", duration=spec.nonmoe_load_time)
            ready = s + max(slowest, spec.nonmoe_load_time)
            f = noise.factor()
            gather = profile.storage_access_delay * f + sum(row) * model.token_out_mb / (
                profile.storage_bandwidth / f)
            trace.add(nxt, ready, "StorageDownload", sum(row) * model.token_out_mb, gather)
            end = ready + gather
        costs.append(layer_cost)
        lats.append(end - s)
        clock = end
    trace.add("tail", clock, "Compute", 0.0, model.tail_time)
    e2e = clock + model.tail_time
    if n_tokens is None:
        n_tokens = real.layer_total(0) if model.n_layers else 0
    return SimReport(costs, lats, e2e, real, overflows, rejects, executed, invocations,
                     n_tokens, trace.merged() if record_events else [])


# ---------------------------------------------------------------- feedback

MEMORY_OVERFLOW, PAYLOAD_OVERFLOW, MISPREDICT = "MemoryOverflow", "PayloadOverflow", "MispredictOnly"


@dataclass(frozen=True)
class FeedbackEvent:
    layer: int
    expert: int
    case: str
    n_new: int


def measure_feedback(report: SimReport, predicted: ExpertDemand, plan: DeploymentPlan,
                     profile: PlatformProfile, model: ModelSpec, alpha: float) -> list:
    """Classify experts whose predicted and real per-replica loads differ by more than ``alpha``.

    ``n_new`` is a replication factor applied to the expert's current
    replica count: the memory overshoot ratio for a memory overflow, and
    for a rejected direct transfer the number of payload-sized pieces one
    replica's larger transfer needs.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    overflow = {(o.layer, o.expert): o for o in report.memory_overflows}
    rejected = set(report.payload_rejects)
    out = []
    for e in range(model.n_layers):
        for i, g in enumerate(plan.replicas[e]):
            real = report.real_tokens.tokens[e][i]
            r_real = ceil_div(real, g)
            if abs(ceil_div(predicted.tokens[e][i], g) - r_real) <= alpha:
                continue
            if (e, i) in overflow:
                o = overflow[(e, i)]
                out.append(FeedbackEvent(e, i, MEMORY_OVERFLOW, math.ceil(o.required_mb / o.configured_mb)))
            elif e in rejected and payload_violated(DIRECT, r_real, profile, model):
                need = r_real * max(model.token_in_mb, model.token_out_mb) / profile.payload_limit
                out.append(FeedbackEvent(e, i, PAYLOAD_OVERFLOW, math.ceil(need)))
            else:
                out.append(FeedbackEvent(e, i, MISPREDICT, 1))
    return out


# ---------------------------------------------------------------- CSV

def write_events_csv(path, events, header_comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(("t", "kind", "function", "bytes", "duration"))
        for ev in events:
            w.writerow((f"{ev.t:.9f}", ev.kind, ev.function, int(round(ev.mb * 1024 * 1024)),
                        f"{ev.duration:.9f}"))


def write_report_csv(path, report: SimReport, header_comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(("layer", "method", "cost_GBs", "latency_s", "real_tokens", "memory_overflows",
                    "payload_reject"))
        for e, (c, lat) in enumerate(zip(report.layer_costs, report.layer_latencies)):
            n_over = sum(1 for o in report.memory_overflows if o.layer == e)
            w.writerow((e, report.executed_methods[e], f"{c:.9f}", f"{lat:.9f}",
                        " ".join(str(d) for d in report.real_tokens.tokens[e]), n_over,
                        int(e in report.payload_rejects)))
        w.writerow(("total", "", f"{report.cost:.9f}", f"{report.e2e_latency:.9f}",
                    report.n_tokens, len(report.memory_overflows), len(report.payload_rejects)))
        w.writerow(("throughput_tokens_per_s", "", f"{report.throughput:.9f}", "", "", "", ""))
