"""Cost of the tuned plan against simple and oracle baselines on the same batches."""
from __future__ import annotations

import csv
from dataclasses import dataclass

from .bo import TrialRecord, TuneResult
from .config import ModelSpec, PlannerConfig, PlatformProfile, ceil_div
from .costmodel import INDIRECT, DeploymentPlan, ExpertDemand, memory_required
from .planner import NoPlanError, cost_options, plan_deployment
from .sim import simulate

STRATEGIES = ("bo_prediction", "plain_prediction", "true_distribution", "max_memory")


@dataclass(frozen=True)
class StrategyOutcome:
    strategy: str
    cost: float                  # mean billed GB-s over the batches
    mean_latency: float
    max_latency: float
    latency_ok: bool             # every batch met the latency limit

    @classmethod
    def from_runs(cls, name: str, costs, lats, limit: float) -> "StrategyOutcome":
        if not costs:
            return cls(name, float("inf"), float("inf"), float("inf"), False)
        c = 0.0
        for x in costs:
            c += x
        t = 0.0
        for x in lats:
            t += x
        return cls(name, c / len(costs), t / len(lats), max(lats), max(lats) <= limit + 1e-9)


def max_memory_plan(demand: ExpertDemand, profile: PlatformProfile, model: ModelSpec) -> DeploymentPlan:
    """Every expert on the largest memory through storage, replicated only if it cannot fit."""
    top = profile.n_memory - 1
    cap = profile.memory_options[top]
    replicas = []
    for e, row in enumerate(demand.tokens):
        reps = []
        for i, d in enumerate(row):
            g = 1
            while g < profile.max_replicas and memory_required(e, i, ceil_div(d, g), model) > cap:
                g += 1
            reps.append(g)
        replicas.append(reps)
    return DeploymentPlan([INDIRECT] * model.n_layers,
                          [[top] * n for n in model.experts_per_layer], replicas, 1)


def _simulate_all(plan, batches, profile, model, opts):
    costs, lats = [], []
    for b in batches:
        rep = simulate(plan, b.demand(model.experts_per_layer), profile, model, opts,
                       record_events=False, n_tokens=b.n_tokens)
        costs.append(rep.cost)
        lats.append(rep.e2e_latency)
    return costs, lats


def _from_trial(name, trial: TrialRecord, limit):
    return StrategyOutcome.from_runs(name, trial.batch_costs, trial.batch_latencies, limit)


def compare(tuned: TuneResult, batches, profile: PlatformProfile, model: ModelSpec,
            planner: PlannerConfig = PlannerConfig()) -> list:
    """Outcomes of the four strategies on the tuning run's evaluation batches."""
    opts = cost_options(planner)
    limit = model.latency_limit
    batches = list(batches)
    out = [_from_trial("bo_prediction", tuned.best, limit),
           _from_trial("plain_prediction", tuned.history[0], limit)]
    costs, lats = [], []
    for b in batches:
        real = b.demand(model.experts_per_layer)
        try:
            result, _ = plan_deployment(real, profile, model, planner)
        except NoPlanError:
            costs, lats = [], []
            break
        c, t = _simulate_all(result.plan, [b], profile, model, opts)
        costs += c
        lats += t
    out.append(StrategyOutcome.from_runs("true_distribution", costs, lats, limit))
    ref = tuned.best.predicted if tuned.best.predicted is not None else batches[0].demand(
        model.experts_per_layer)
    c, t = _simulate_all(max_memory_plan(ref, profile, model), batches, profile, model, opts)
    out.append(StrategyOutcome.from_runs("max_memory", c, t, limit))
    return out


def write_compare_csv(path, rows, header_comment: str | None = None):
    """``rows`` are (seed, StrategyOutcome) pairs."""
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(("seed", "strategy", "cost_GBs", "mean_latency_s", "max_latency_s", "latency_ok"))
        for seed, o in rows:
            w.writerow((seed, o.strategy, f"{o.cost:.9f}", f"{o.mean_latency:.9f}",
                        f"{o.max_latency:.9f}", int(o.latency_ok)))
