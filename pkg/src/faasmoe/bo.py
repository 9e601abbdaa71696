"""Feedback-driven tuning of the feature table (multi-dimensional epsilon-greedy search).

Each iteration overwrites Q (key, count) pairs of the profiled table,
predicts expert demand, plans a deployment, simulates J serving batches
and scores the trial by their mean billed cost.  Mispredictions found in
the simulations raise the exploration rate of the first ``mu * Q``
dimensions and narrow their sampling to keys of the offending tokens.
The search keeps, dimension by dimension, the pairs of the cheapest
trial so far with probability ``1 - epsilon``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import ModelSpec, PlannerConfig, PlatformProfile, TunerConfig
from .costmodel import DeploymentPlan, ExpertDemand
from .planner import NoPlanError, cost_options, plan_deployment
from .predictor import FeatureTable, NewBatchStats, predict_demand
from .sim import MEMORY_OVERFLOW, MISPREDICT, PAYLOAD_OVERFLOW, measure_feedback, simulate

CASES = (MEMORY_OVERFLOW, PAYLOAD_OVERFLOW, MISPREDICT)


def decay_epsilon(eps0, rho: float, tau: int) -> np.ndarray:
    if rho <= 0:
        raise ValueError("rho must be positive")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return np.asarray(eps0, dtype=np.float64) / (1.0 + rho * tau)


@dataclass
class EpsilonVector:
    values: np.ndarray
    base: np.ndarray
    mu: float

    @classmethod
    def initial(cls, eps0: float, Q: int, mu: float) -> "EpsilonVector":
        base = np.full(Q, float(eps0))
        return cls(base.copy(), base, mu)

    @property
    def slow(self) -> int:
        """Size of the slow-decay block, the first ``mu * Q`` dimensions."""
        return int(self.mu * len(self.values))

    def decayed(self, rho: float, tau: int) -> "EpsilonVector":
        return EpsilonVector(decay_epsilon(self.base, rho, tau), self.base, self.mu)

    def max(self) -> float:
        return float(self.values.max()) if len(self.values) else 0.0


def feedback_rate(case: str, cfg: TunerConfig) -> float:
    return {MEMORY_OVERFLOW: cfg.rho1, PAYLOAD_OVERFLOW: cfg.rho2, MISPREDICT: cfg.rho3}[case]


def apply_feedback(events: Sequence, eps: EpsilonVector, tau: int, cfg: TunerConfig,
                   replicas: Sequence[Sequence[int]] | None = None, max_replicas: int | None = None):
    """Raise the slow block of ``eps`` and derive replica floors for the next plan.

    By default the block is multiplied once, by ``1 + rho' * tau`` with the
    largest triggered rate; ``per_event_feedback`` multiplies once per event.
    Returns (new epsilon, {(layer, expert): minimum replicas}).
    """
    values = eps.values.copy()
    k = eps.slow
    if events:
        if cfg.per_event_feedback:
            for ev in events:
                values[:k] *= 1.0 + feedback_rate(ev.case, cfg) * tau
        else:
            values[:k] *= 1.0 + max(feedback_rate(ev.case, cfg) for ev in events) * tau
    floors: dict = {}
    for ev in events:
        if ev.n_new <= 1 or replicas is None:
            continue
        want = replicas[ev.layer][ev.expert] * ev.n_new
        if max_replicas is not None:
            want = min(want, max_replicas)
        key = (ev.layer, ev.expert)
        floors[key] = max(floors.get(key, 1), want)
    return EpsilonVector(values, eps.base, eps.mu), floors


def convergence_bound(rho: float, rho1: float, eps0, delta: float) -> float:
    """Iteration after which the worst-case epsilon envelope is claimed to stay below ``delta``."""
    top = float(np.max(np.asarray(eps0, dtype=np.float64)))
    if not rho > rho1:
        raise ValueError("require rho > rho1")
    if not 0 < delta <= top:
        raise ValueError("require 0 < delta <= max epsilon_0")
    return (1.0 + rho) / (rho - rho1) * (1.0 - delta / top)


def worst_case_epsilon(eps0, rho: float, rho1: float, tau: int) -> float:
    """Largest epsilon at iteration ``tau`` when memory-overflow feedback fires every iteration."""
    top = float(np.max(np.asarray(eps0, dtype=np.float64)))
    return top * (1.0 + rho1 * tau) / (1.0 + rho * tau)


def first_crossing(eps0, rho: float, rho1: float, delta: float, horizon: int = 10000):
    """First iteration whose worst-case epsilon is below ``delta``, or None within ``horizon``."""
    for tau in range(1, horizon + 1):
        if worst_case_epsilon(eps0, rho, rho1, tau) < delta:
            return tau
    return None


# ------------------------------------------------------------- search space

class KeySpace:
    """The normal range of keys: any (token, position, attention id, layer, expert).

    Keys observed while profiling are kept in a list so half of the
    fresh draws can reuse them; the other half are uniform over the
    whole key space.
    """

    def __init__(self, table: FeatureTable, vocab_size: int, seq_len: int):
        self.keys = list(table.counts)
        if not self.keys:
            raise ValueError("empty feature table")
        self.table = table
        self.vocab_size = int(vocab_size)
        self.seq_len = int(seq_len)
        self.experts = np.asarray(table.experts_per_layer, dtype=np.int64)

    def count(self, key) -> int:
        return self.table.counts.get(key, 0)

    def value_bound(self, key) -> int:
        c = self.count(key)
        return 2 * c if c > 0 else 10

    def _random_keys(self, n: int, f1_pool, f3_pool, rng) -> list:
        if n == 0:
            return []
        f1 = f1_pool[rng.integers(0, len(f1_pool), size=n)]
        f2 = rng.integers(0, self.seq_len, size=n)
        f3 = f3_pool[rng.integers(0, len(f3_pool), size=n)]
        layer = rng.integers(0, len(self.experts), size=n)
        expert = (rng.random(n) * self.experts[layer]).astype(np.int64)
        return list(zip(f1.tolist(), f2.tolist(), f3.tolist(), layer.tolist(), expert.tolist()))

    def sample_normal(self, n: int, rng) -> list:
        old = rng.random(n) < 0.5
        idx = rng.integers(0, len(self.keys), size=int(old.sum()))
        vocab = np.arange(self.vocab_size, dtype=np.int64)
        fresh = iter(self._random_keys(int((~old).sum()), vocab, vocab, rng))
        known = iter(self.keys[k] for k in idx.tolist())
        return [next(known) if o else next(fresh) for o in old.tolist()]

    def sample_limited(self, n: int, tokens: np.ndarray, rng) -> list:
        """Keys whose token and attention ids come from mispredicted batches."""
        return self._random_keys(n, tokens, tokens, rng)


def propose(best_pairs: Sequence, space: KeySpace, limited_tokens, eps: EpsilonVector,
            rng: np.random.Generator) -> list:
    """Keep each best pair with probability ``1 - eps_q``, else sample a fresh one.

    Fresh pairs of the slow block come from the limited range (token ids
    of mispredicted batches) when there is one, otherwise from the normal
    range.  Values are uniform on [1, 2 * profiled count], or [1, 10] for
    keys never profiled.
    """
    Q = len(eps.values)
    if len(best_pairs) != Q:
        raise ValueError("need exactly Q best pairs")
    tokens = np.asarray(limited_tokens if limited_tokens is not None else [], dtype=np.int64)
    explore = rng.random(Q) < eps.values
    slow = np.arange(Q) < eps.slow
    lim = explore & slow & (tokens.size > 0)
    norm = explore & ~lim
    keys = {}
    for q, key in zip(np.flatnonzero(lim).tolist(), space.sample_limited(int(lim.sum()), tokens, rng)):
        keys[q] = key
    for q, key in zip(np.flatnonzero(norm).tolist(), space.sample_normal(int(norm.sum()), rng)):
        keys[q] = key
    out = list(best_pairs)
    order = sorted(keys)
    if order:
        hi = np.array([space.value_bound(keys[q]) for q in order], dtype=np.int64)
        vals = rng.integers(1, hi + 1)
        for q, v in zip(order, vals.tolist()):
            out[q] = (keys[q], int(v))
    return out


def initial_pairs(space: KeySpace, Q: int, rng: np.random.Generator) -> list:
    """Q profiled keys at their profiled counts, so the first trial is the plain profile."""
    idx = rng.integers(0, len(space.keys), size=Q)
    return [(space.keys[k], space.count(space.keys[k])) for k in idx.tolist()]


# ---------------------------------------------------------------- one trial

@dataclass
class TrialRecord:
    iteration: int
    pairs: list
    min_replicas: dict
    cost: float
    batch_costs: list
    events: list                   # one list of feedback events per batch
    plan: DeploymentPlan | None
    predicted: ExpertDemand | None
    planned_cost: float
    batch_latencies: list = field(default_factory=list)
    max_epsilon: float = 0.0

    def case_counts(self) -> dict:
        out = {c: 0 for c in CASES}
        for per_batch in self.events:
            for ev in per_batch:
                out[ev.case] += 1
        return out


def pooled_prediction(table: FeatureTable, batches: Sequence, k: int, seq_len: int) -> ExpertDemand:
    """Per-batch predicted demand over all evaluation batches, rounded up."""
    ids = np.concatenate([b.token_ids() for b in batches]).tolist()
    total = predict_demand(table, ids, k, stats=NewBatchStats.from_tokens(ids, seq_len))
    J = len(batches)
    return ExpertDemand([[-(-d // J) for d in row] for row in total.tokens])


def evaluate_trial(base: FeatureTable, pairs: Sequence, min_replicas: dict, batches: Sequence,
                   profile: PlatformProfile, model: ModelSpec, planner: PlannerConfig,
                   cfg: TunerConfig, k: int, seq_len: int, iteration: int = 0) -> TrialRecord:
    """Overwrite ``pairs`` in ``base``, plan, and simulate every batch."""
    table = base.with_overrides(pairs)
    predicted = pooled_prediction(table, batches, k, seq_len)
    try:
        result, _ = plan_deployment(predicted, profile, model, planner, min_replicas or None)
    except NoPlanError:
        return TrialRecord(iteration, list(pairs), dict(min_replicas), math.inf, [], [], None,
                           predicted, math.inf)
    opts = cost_options(planner)
    experts = model.experts_per_layer
    costs, lats, events = [], [], []
    for b in batches:
        report = simulate(result.plan, b.demand(experts), profile, model, opts,
                          record_events=False, n_tokens=b.n_tokens)
        costs.append(report.cost)
        lats.append(report.e2e_latency)
        events.append(measure_feedback(report, predicted, result.plan, profile, model, cfg.alpha))
    mean = 0.0
    for c in costs:
        mean += c
    mean /= len(costs)
    return TrialRecord(iteration, list(pairs), dict(min_replicas), mean, costs, events,
                       result.plan, predicted, result.cost, lats)


# ------------------------------------------------------------------ the loop

@dataclass
class TuneResult:
    best: TrialRecord
    history: list
    stopped: bool                  # stop rule fired (else iteration cap)
    epsilon_trace: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.history)

    def best_so_far(self) -> list:
        out, cur = [], math.inf
        for t in self.history:
            cur = min(cur, t.cost)
            out.append(cur)
        return out


def stop_rule(best_so_far: Sequence[float], lam: int, zeta: float) -> bool:
    """True once the best cost moved by less than ``zeta`` over the last ``lam`` iterations."""
    if len(best_so_far) <= lam:
        return False
    old, new = best_so_far[-1 - lam], best_so_far[-1]
    if math.isinf(old) and math.isinf(new):
        return math.isinf(zeta)
    return old - new < zeta


def run(base: FeatureTable, batches: Sequence, profile: PlatformProfile, model: ModelSpec,
        cfg: TunerConfig = TunerConfig(), planner: PlannerConfig = PlannerConfig(),
        k: int = 1, seq_len: int = 128, seed: int = 0, vocab_size: int | None = None) -> TuneResult:
    """Tune ``base`` against the evaluation ``batches`` until the cost plateaus."""
    if cfg.batches > len(batches):
        raise ValueError(f"need {cfg.batches} evaluation batches, got {len(batches)}")
    batches = list(batches)[:cfg.batches]
    if vocab_size is None:
        vocab_size = 1 + max(max(key[0], key[2]) for key in base.counts)
    space = KeySpace(base, vocab_size, seq_len)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    eps = EpsilonVector.initial(cfg.epsilon0, cfg.Q, cfg.mu)
    pairs = initial_pairs(space, cfg.Q, rng)
    floors: dict = {}
    history, eps_trace, best_so_far = [], [], []
    best = None
    stopped = False
    for tau in range(1, cfg.max_iterations + 1):
        eps_tau = eps.decayed(cfg.rho, tau)
        trial = evaluate_trial(base, pairs, floors, batches, profile, model, planner, cfg, k,
                               seq_len, tau)
        flat = [ev for per_batch in trial.events for ev in per_batch]
        replicas = trial.plan.replicas if trial.plan is not None else None
        eps_tau, floors = apply_feedback(flat, eps_tau, tau, cfg, replicas, profile.max_replicas)
        trial.max_epsilon = eps_tau.max()
        history.append(trial)
        eps_trace.append(eps_tau.max())
        if best is None or trial.cost < best.cost:
            best = trial
        best_so_far.append(best.cost)
        if stop_rule(best_so_far, cfg.lam, cfg.zeta):
            stopped = True
            break
        bad = [b.token_ids() for b, evs in zip(batches, trial.events) if evs]
        limited = np.concatenate(bad) if bad else None
        pairs = propose(best.pairs, space, limited, eps_tau, rng)
    return TuneResult(best, history, stopped, eps_trace)


def write_trace_csv(path, result: TuneResult, header_comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(("iteration", "cost", "min_cost", "planned_cost", "max_epsilon")
                   + tuple(f"n_{c}" for c in CASES))
        for t, m in zip(result.history, result.best_so_far()):
            counts = t.case_counts()
            w.writerow((t.iteration, f"{t.cost:.9f}", f"{m:.9f}", f"{t.planned_cost:.9f}",
                        f"{t.max_epsilon:.9f}") + tuple(counts[c] for c in CASES))


def write_pairs_csv(path, pairs: Sequence, header_comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(("q", "token_id", "position_id", "attention_id", "layer", "expert", "count"))
        for q, (key, v) in enumerate(pairs):
            w.writerow((q, *key, v))
