"""Deployment planning: exact fixed-method solves plus per-layer method selection.

With the communication method fixed, the only couplings between experts
are the per-layer ``max`` terms of the latency and, for the pipelined
method, the global pipeline degree.  The solver therefore

* enumerates every (memory, replicas) option of every expert,
* builds each layer's cost/latency Pareto front by sweeping a threshold
  on the slowest replica (and, for direct transfer, on the largest
  per-replica token count),
* merges the fronts across layers under the end-to-end latency limit,
* and, for the pipelined method, searches the pipeline degree in order of
  a latency-free cost floor computed by the compiled kernel, stopping
  once the floor exceeds the best plan found.
"""
from __future__ import annotations

import functools
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .config import ModelSpec, PlannerConfig, PlatformProfile, ceil_div
from .costmodel import (DIRECT, INDIRECT, LATENCY_TOL, METHODS, PIPELINED, CostOptions,
                        DeploymentPlan, ExpertDemand, direct_layer_latency, evaluate_plan,
                        head_time, indirect_gather_time, indirect_layer_latency,
                        memory_required, payload_violated, replica_time)

INF = math.inf
FRONT_CAP = 20000


class NoPlanError(RuntimeError):
    """No deployment satisfies the hard constraints under any method."""


class OracleCapError(ValueError):
    """Instance is larger than the brute-force oracle accepts."""


def cost_options(config: PlannerConfig) -> CostOptions:
    return CostOptions(block_multiplier=config.block_multiplier,
                       printed_direct_constraint=config.printed_direct_constraint)


@dataclass
class FixedMethodSolution:
    method: int
    layer_costs: list              # GB-s per layer, INF where the layer has no valid config
    layer_latencies: list
    memory: list
    replicas: list
    beta: int
    cost: float                    # sum of layer_costs
    e2e_latency: float
    latency_ok: bool
    optimal: bool

    @property
    def feasible(self) -> bool:
        return self.latency_ok and math.isfinite(self.cost)

    def plan(self) -> DeploymentPlan:
        return DeploymentPlan([self.method] * len(self.memory), self.memory, self.replicas, self.beta)


@dataclass
class OdsResult:
    methods: list
    plan: DeploymentPlan
    cost: float
    e2e_latency: float
    iterations: int
    fallback: bool
    latency_ok: bool


# ------------------------------------------------------------ layer fronts

@dataclass
class _LayerPoint:
    cost: float
    latency: float
    memory: tuple
    replicas: tuple


@functools.lru_cache(maxsize=8192)
def _combos(a, e, i, d, gmin, profile, model, opts):
    """Valid (g, r, j) triples of one active expert, independent of beta."""
    gs, rs, js = [], [], []
    for g in range(gmin, profile.max_replicas + 1):
        r = ceil_div(d, g)
        if payload_violated(a, r, profile, model, opts):
            continue
        need = memory_required(e, i, r, model)
        for j, mem in enumerate(profile.memory_options):
            if need <= mem:
                gs.append(g)
                rs.append(r)
                js.append(j)
    return (np.array(gs, dtype=np.int64), np.array(rs, dtype=np.int64),
            np.array(js, dtype=np.int64))


def _options(a, e, i, d, beta, gmin, profile, model, opts):
    """Valid (trep, cost, r, j, g) options of one active expert."""
    head = head_time(model.layers[e].param_mb[i], profile)
    g, r, j = _combos(a, e, i, d, gmin, profile, model, opts)
    if a != PIPELINED:
        out = []
        for gg, rr, jj in zip(g.tolist(), r.tolist(), j.tolist()):
            trep = replica_time(a, rr, head, profile.unit_compute_time[jj], beta, profile, model, opts)
            out.append((trep, (gg * trep) * (profile.memory_options[jj] / 1024.0), rr, jj, gg))
        return out
    # same operation order as replica_time, so every value is bit-identical
    bs, tdl = profile.storage_bandwidth, profile.storage_access_delay
    do_bs, din_bs = model.token_out_mb / bs, model.token_in_mb / bs
    tcal = np.asarray(profile.unit_compute_time, dtype=np.float64)[j]
    n = -(-r // beta)
    t_nblk = tdl + n * do_bs
    t_blk = tdl + beta * np.maximum(din_bs + tcal, do_bs)
    n_blocks = beta if opts.block_multiplier == "beta" else n
    trep = head + t_nblk + n_blocks * t_blk
    cost = (g * trep) * (np.asarray(profile.memory_options, dtype=np.float64)[j] / 1024.0)
    order = np.argsort(trep, kind="stable")
    c = cost[order]
    keep = order[c < np.minimum.accumulate(np.concatenate(([INF], c[:-1])))]
    return list(zip(trep[keep].tolist(), cost[keep].tolist(), r[keep].tolist(),
                    j[keep].tolist(), g[keep].tolist()))


def _idle_config(a, e, i, gmin, profile, model, opts):
    """Cheapest valid setting of an expert that receives no tokens."""
    if payload_violated(a, 0, profile, model, opts):
        return None
    need = memory_required(e, i, 0, model)
    for j, mem in enumerate(profile.memory_options):
        if need <= mem:
            return j, gmin
    return None


def _pareto(points):
    points.sort(key=lambda p: (p.cost, p.latency))
    out, best_lat = [], INF
    for p in points:
        if p.latency < best_lat:
            out.append(p)
            best_lat = p.latency
    return out


def _layer_front(a, e, demand, beta, gmins, profile, model, opts):
    """Pareto front (cost, latency) of one layer, or None if no valid config."""
    n = model.layers[e].n_experts
    row = demand.tokens[e]
    fixed, active = {}, []
    for i in range(n):
        gmin = gmins(e, i)
        if row[i] > 0:
            o = _options(a, e, i, row[i], beta, gmin, profile, model, opts)
            if not o:
                return None
            active.append((i, o))
        else:
            cfg = _idle_config(a, e, i, gmin, profile, model, opts)
            if cfg is None:
                return None
            fixed[i] = cfg

    def point(choice):
        mem, reps, costs = [0] * n, [0] * n, [0.0] * n
        for i, (j, g) in fixed.items():
            mem[i], reps[i] = j, g
        slowest, max_r = 0.0, 0
        for i, (trep, c, r, j, g) in choice.items():
            mem[i], reps[i], costs[i] = j, g, c
            slowest = max(slowest, trep)
            max_r = max(max_r, r)
        billed = 0.0
        for c in costs:
            billed += c
        if a == DIRECT:
            lat = direct_layer_latency(max_r, slowest, e, profile, model)
        else:
            lat = indirect_layer_latency(slowest, indirect_gather_time(sum(row), profile, model), e, model)
        return _LayerPoint(billed, lat, tuple(mem), tuple(reps))

    if not active:
        return [point({})]
    if a == DIRECT:
        r_caps = sorted({o[2] for _, opts_i in active for o in opts_i})
    else:
        # without a load cap, an option is only ever picked if it beats every faster one
        r_caps = [None]
        active = [(i, _undominated(o)) for i, o in active]
    points = []
    for cap in r_caps:
        events = sorted(((o[0], i, o) for i, opts_i in active for o in opts_i
                         if cap is None or o[2] <= cap), key=lambda t: t[0])
        best: dict = {}
        last = INF
        k = 0
        while k < len(events):
            t = events[k][0]
            while k < len(events) and events[k][0] == t:
                _, i, o = events[k]
                cur = best.get(i)
                if cur is None or o[1] < cur[1]:
                    best[i] = o
                k += 1
            if len(best) == len(active):
                billed = 0.0
                for i in sorted(best):
                    billed += best[i][1]
                if billed < last:
                    points.append(point(best))
                    if cap is None:
                        last = billed
    return _pareto(points)


def _undominated(options):
    out, best = [], INF
    for o in sorted(options, key=lambda o: o[0]):
        if o[1] < best:
            out.append(o)
            best = o[1]
    return out


# ------------------------------------------------------------ cross-layer

def _merge_layers(fronts, model, deadline, upper=INF):
    """Minimum total cost subject to the end-to-end latency limit.

    Partial latencies accumulate exactly as ``end_to_end_latency`` does so
    the feasibility verdict matches the cost model bit for bit.  States
    that cannot finish under the limit, or cannot beat ``upper``, are
    dropped.  Returns (chosen points, exact flag); points is None when
    nothing meets the limit.
    """
    limit = model.latency_limit + LATENCY_TOL
    exact = True
    n = len(fronts)
    f_cost = [np.array([p.cost for p in f]) for f in fronts]
    f_lat = [np.array([p.latency for p in f]) for f in fronts]
    # cheapest and fastest completions of layers e.. onwards, with a little slack
    rest_cost, rest_lat = np.zeros(n + 1), np.zeros(n + 1)
    for e in range(n - 1, -1, -1):
        rest_cost[e] = rest_cost[e + 1] + f_cost[e].min()
        rest_lat[e] = rest_lat[e + 1] + f_lat[e].min() + model.layers[e].nonmoe_compute_time
    cost = np.zeros(1)
    lat = np.array([model.head_time + model.tail_time])
    back = []
    for e in range(n):
        ne = model.layers[e].nonmoe_compute_time
        c = (cost[:, None] + f_cost[e][None, :]).reshape(-1)
        t = (lat[:, None] + (f_lat[e] + ne)[None, :]).reshape(-1)
        keep = (t <= limit) & (t + rest_lat[e + 1] <= limit + 1e-9 * (1 + limit))
        if math.isfinite(upper):
            keep &= c + rest_cost[e + 1] <= upper * (1 + 1e-9)
        idx = np.flatnonzero(keep)
        if idx.size == 0:
            return None, exact
        order = idx[np.lexsort((t[idx], c[idx]))]
        ts = t[order]
        prev_min = np.minimum.accumulate(np.concatenate(([INF], ts[:-1])))
        order = order[ts < prev_min]
        if order.size > FRONT_CAP:
            exact = False
            order = order[np.linspace(0, order.size - 1, FRONT_CAP).astype(np.int64)]
        if deadline is not None and time.monotonic() > deadline:
            exact = False
        back.append(order)
        cost, lat = c[order], t[order]
    chosen = []
    state = 0
    for e in range(n - 1, -1, -1):
        flat = back[e][state]
        width = len(fronts[e])
        state, pi = divmod(int(flat), width)
        chosen.append(fronts[e][pi])
    chosen.reverse()
    return chosen, exact


def _solve_at_beta(a, demand, beta, gmins, profile, model, opts, deadline, upper=INF):
    """(total cost, chosen per-layer points, latency_ok, exact)."""
    fronts = [_layer_front(a, e, demand, beta, gmins, profile, model, opts)
              for e in range(model.n_layers)]
    if any(f is None for f in fronts):
        chosen = [f[0] if f else None for f in fronts]
        return INF, chosen, False, True
    cheapest = [f[0] for f in fronts]
    t = model.head_time + model.tail_time
    for e, p in enumerate(cheapest):
        t += p.latency + model.layers[e].nonmoe_compute_time
    if t <= model.latency_limit + LATENCY_TOL:
        chosen, exact, ok = cheapest, True, True
    else:
        chosen, exact = _merge_layers(fronts, model, deadline, upper)
        ok = chosen is not None
        if not ok:
            chosen = cheapest
    total = 0.0
    for p in chosen:
        total += p.cost
    return total, chosen, ok, exact


# ----------------------------------------------------------- fixed method

def _gmin_lookup(profile, overrides):
    overrides = dict(overrides or {})

    def gmin(e, i):
        return min(profile.max_replicas, max(1, int(overrides.get((e, i), 1))))
    return gmin


class _PipelinedBounds:
    """Per-beta lower bounds for the pipelined method, via the compiled kernel.

    Rows are the active experts of every layer.  With weights ``lam`` on
    each layer's most loaded expert the kernel returns a Lagrangian bound:
    a layer's latency is at least that expert's replica time plus the
    gather stage, so the latency limit caps the sum of those replica times.
    """

    def __init__(self, demand, gmins, profile, model, opts, beta_hi):
        G = profile.max_replicas
        rows = [(e, i) for e in range(model.n_layers)
                for i, d in enumerate(demand.tokens[e]) if d > 0]
        self.beta_hi = beta_hi
        self.r = np.full((len(rows), G), -1, dtype=np.int64)
        self.feas = np.zeros((len(rows), G, profile.n_memory), dtype=np.uint8)
        self.head = np.zeros(len(rows))
        self.heavy = np.zeros(len(rows))
        heaviest = {}
        for k, (e, i) in enumerate(rows):
            d = demand.tokens[e][i]
            if e not in heaviest or d > demand.tokens[e][rows[heaviest[e]][1]]:
                heaviest[e] = k
            self.head[k] = head_time(model.layers[e].param_mb[i], profile)
            for g in range(gmins(e, i), G + 1):
                rr = ceil_div(d, g)
                self.r[k, g - 1] = rr
                if payload_violated(PIPELINED, rr, profile, model, opts):
                    continue
                need = memory_required(e, i, rr, model)
                for j, mem in enumerate(profile.memory_options):
                    self.feas[k, g - 1, j] = need <= mem
        for k in heaviest.values():
            self.heavy[k] = 1.0
        self.unit = np.asarray(profile.unit_compute_time, dtype=np.float64)
        self.mem_gb = np.asarray(profile.memory_options, dtype=np.float64) / 1024.0
        bs = profile.storage_bandwidth
        self.consts = (model.token_in_mb / bs, model.token_out_mb / bs, profile.storage_access_delay)
        self.multiplier = opts.block_multiplier == "beta"
        self.slack = model.latency_budget() - sum(
            indirect_gather_time(demand.layer_total(e), profile, model) for e in range(model.n_layers))

    def _run(self, mem_gb, lam, lo, hi):
        return kernels.pipelined_cost_floor(self.r, self.feas, self.head, self.unit, mem_gb, lam,
                                            *self.consts, lo, hi, self.multiplier)

    def bounds(self):
        """(cost lower bound per beta, True where beta is provably latency-infeasible)."""
        hi = self.beta_hi
        floor = self._run(self.mem_gb, np.zeros_like(self.heavy), 1, hi)
        fastest = self._run(np.zeros_like(self.mem_gb), self.heavy, 1, hi)
        hopeless = fastest > self.slack + 1e-9 * (1 + abs(self.slack))
        if not self.heavy.any() or not np.isfinite(floor).any():
            return floor, hopeless
        ok = np.flatnonzero(~hopeless)
        b0 = int(ok[np.argmin(floor[ok])]) + 1 if ok.size else int(np.argmin(floor)) + 1
        best_val, best_lam = floor[b0 - 1], 0.0
        for lam in np.logspace(-3, 3, 25):
            val = self._run(self.mem_gb, lam * self.heavy, b0, b0)[0] - lam * self.slack
            if val > best_val:
                best_val, best_lam = val, lam
        if best_lam > 0:
            lag = self._run(self.mem_gb, best_lam * self.heavy, 1, hi) - best_lam * self.slack
            floor = np.maximum(floor, lag)
        return floor, hopeless


def solve_fixed_method(a: int, demand: ExpertDemand, profile: PlatformProfile, model: ModelSpec,
                       config: PlannerConfig = PlannerConfig(),
                       min_replicas: Mapping | None = None) -> FixedMethodSolution:
    """Cheapest deployment with every layer using method ``a``.

    ``min_replicas`` maps (layer, expert) to a lower bound on the replica
    count (replication directives from tuning feedback).  Layers with no
    valid configuration get an infinite cost.  When the latency limit
    cannot be met, each layer's cheapest configuration is returned with
    ``latency_ok`` cleared so method selection can arbitrate.
    """
    if a not in METHODS:
        raise ValueError(f"unknown method {a}")
    if demand.shape != tuple(model.experts_per_layer):
        raise ValueError("demand does not match the model topology")
    opts = cost_options(config)
    gmins = _gmin_lookup(profile, min_replicas)
    t0 = time.monotonic()
    deadline = t0 + config.time_budget_s
    exact = True

    if a != PIPELINED:
        best = (*_solve_at_beta(a, demand, 1, gmins, profile, model, opts, deadline), 1)
        exact = best[3]
    else:
        beta_hi = max([ceil_div(d, gmins(e, i)) for e in range(model.n_layers)
                       for i, d in enumerate(demand.tokens[e])] + [1])
        if config.beta_max is not None:
            beta_hi = min(beta_hi, config.beta_max)
        pre = [_layer_front(PIPELINED, e, demand, 1, gmins, profile, model, opts)
               for e in range(model.n_layers)]
        if any(f is None for f in pre):
            # some layer has no valid configuration at any beta
            order, floor, hopeless = [0], [0.0], [False]
        else:
            floor, hopeless = _PipelinedBounds(demand, gmins, profile, model, opts, beta_hi).bounds()
            order = sorted(range(beta_hi), key=lambda k: (bool(hopeless[k]), floor[k], k))
        best = None
        for k in order:
            if best is not None and best[2] and floor[k] > best[0] * (1 + 1e-9):
                break
            if best is not None and hopeless[k]:
                break
            if time.monotonic() > deadline and best is not None:
                exact = False
                break
            cand = (*_solve_at_beta(a, demand, k + 1, gmins, profile, model, opts, deadline,
                                    best[0] if best is not None and best[2] else INF), k + 1)
            exact = exact and cand[3]
            if best is None or (cand[2], -cand[0]) > (best[2], -best[0]):
                best = cand
        # the optimum never has beta above every per-replica load; enforce it anyway
        chosen, beta = best[1], best[4]
        if all(p is not None for p in chosen):
            max_r = max([ceil_div(d, g) for p, row in zip(chosen, demand.tokens)
                         for d, g in zip(row, p.replicas)] + [0])
            if beta > max(1, max_r):
                best = (*_solve_at_beta(a, demand, max(1, max_r), gmins, profile, model, opts,
                                        deadline), max(1, max_r))
    total, chosen, ok, solved_exact, beta = best
    exact = exact and solved_exact
    return _solution(a, demand, chosen, beta, ok, exact, profile, model, opts)


def _solution(a, demand, chosen, beta, ok, exact, profile, model, opts):
    memory, replicas = [], []
    for e, p in enumerate(chosen):
        if p is None:
            n = model.layers[e].n_experts
            memory.append((profile.n_memory - 1,) * n)
            replicas.append((1,) * n)
        else:
            memory.append(p.memory)
            replicas.append(p.replicas)
    plan = DeploymentPlan([a] * model.n_layers, memory, replicas, beta)
    if any(p is None for p in chosen):
        costs = [INF if p is None else p.cost for p in chosen]
        lats = [INF if p is None else p.latency for p in chosen]
        total, e2e, ok = INF, INF, False
    else:
        rows, total, e2e = evaluate_plan(plan, demand, profile, model, opts)
        costs = [r.billed_cost for r in rows]
        lats = [r.latency for r in rows]
        ok = ok and e2e <= model.latency_limit + LATENCY_TOL
    return FixedMethodSolution(method=a, layer_costs=costs, layer_latencies=lats,
                               memory=memory, replicas=replicas, beta=beta, cost=total,
                               e2e_latency=e2e, latency_ok=ok, optimal=exact)


# --------------------------------------------------------------------- ODS

def _assemble(methods, solutions, model):
    by_method = {s.method: s for s in solutions}
    beta = by_method[PIPELINED].beta if PIPELINED in by_method else 1
    memory = [by_method[a].memory[e] for e, a in enumerate(methods)]
    replicas = [by_method[a].replicas[e] for e, a in enumerate(methods)]
    return DeploymentPlan(methods, memory, replicas, beta)


def _clamp_beta(plan, demand):
    """Lower beta to the largest per-replica load when mixing layers left it above."""
    if PIPELINED not in plan.method:
        return plan if plan.beta == 1 else DeploymentPlan(plan.method, plan.memory, plan.replicas, 1)
    max_r = max([ceil_div(d, g) for row, reps in zip(demand.tokens, plan.replicas)
                 for d, g in zip(row, reps)] + [0])
    if plan.beta > max(1, max_r):
        return DeploymentPlan(plan.method, plan.memory, plan.replicas, max(1, max_r))
    return plan


def ods(solutions: Sequence[FixedMethodSolution], demand: ExpertDemand, profile: PlatformProfile,
        model: ModelSpec, config: PlannerConfig = PlannerConfig()) -> OdsResult:
    """Pick a communication method per layer from the three fixed-method solutions.

    Each round takes the per-layer cheapest method.  If the assembled plan
    misses the latency limit, the chosen method of the slowest layer is
    struck out for that layer and the round repeats, at most ``2 * layers``
    times.  After that the cheapest uniform solution is used, preferring
    ones that meet the limit.  A feasible mix is still swapped for a
    cheaper uniform solution that meets the limit.
    """
    opts = cost_options(config)
    n_layers = model.n_layers
    sols = sorted(solutions, key=lambda s: s.method)
    costs = {s.method: list(s.layer_costs) for s in sols}
    for e in range(n_layers):
        if all(math.isinf(costs[a][e]) for a in costs):
            raise NoPlanError(f"layer {e} has no valid configuration under any method")
    iterations = 0
    for _ in range(2 * n_layers):
        choice = []
        for e in range(n_layers):
            a = min(costs, key=lambda m: (costs[m][e], m))
            if math.isinf(costs[a][e]):
                choice = None
                break
            choice.append(a)
        if choice is None:
            break
        iterations += 1
        plan = _clamp_beta(_assemble(choice, sols, model), demand)
        rows, total, e2e = evaluate_plan(plan, demand, profile, model, opts)
        if e2e <= model.latency_limit + LATENCY_TOL:
            basis = sum(costs[m][e] for e, m in enumerate(choice))
            return _cheaper_uniform(OdsResult(choice, plan, total, e2e, iterations, False, True),
                                    basis, sols, demand, profile, model, opts)
        lats = [r.latency for r in rows]
        if config.worst_layer == "highest":
            worst = max(range(n_layers), key=lambda e: (lats[e], -e))
        else:
            worst = min(range(n_layers), key=lambda e: (lats[e], e))
        costs[choice[worst]][worst] = INF
    usable = [s for s in sols if math.isfinite(s.cost)]
    if not usable:
        raise NoPlanError("no uniform method has a valid configuration for every layer")
    pick = min(usable, key=lambda s: (not s.latency_ok, s.cost, s.method))
    plan = pick.plan()
    rows, total, e2e = evaluate_plan(plan, demand, profile, model, opts)
    return OdsResult([pick.method] * n_layers, plan, total, e2e, iterations, True,
                     e2e <= model.latency_limit + LATENCY_TOL)


def _cheaper_uniform(result, basis, sols, demand, profile, model, opts):
    """A latency-feasible uniform solution beats a mix that struck layers into dearer methods.

    ``basis`` is the mix's cost summed from the same per-layer costs ODS ranks by.
    """
    for s in sols:
        if not s.feasible or not sum(s.layer_costs) < basis:
            continue
        plan = _clamp_beta(s.plan(), demand)
        _, total, e2e = evaluate_plan(plan, demand, profile, model, opts)
        if e2e <= model.latency_limit + LATENCY_TOL:
            basis = sum(s.layer_costs)
            result = OdsResult([s.method] * model.n_layers, plan, total, e2e, result.iterations,
                               False, True)
    return result


def plan_deployment(demand: ExpertDemand, profile: PlatformProfile, model: ModelSpec,
                    config: PlannerConfig = PlannerConfig(), min_replicas: Mapping | None = None):
    """Three fixed-method solves followed by ODS; returns (OdsResult, solutions)."""
    sols = [solve_fixed_method(a, demand, profile, model, config, min_replicas) for a in METHODS]
    return ods(sols, demand, profile, model, config), sols


def approximation_ratio_bound(profile: PlatformProfile) -> float:
    """Worst-case ratio of the ODS cost to the optimum (memory in GB)."""
    u = profile.unit_compute_time
    inv = (1.0 / profile.storage_bandwidth, 1.0 / profile.function_bandwidth)
    m_max = profile.memory_options[-1] / 1024.0
    return (m_max * profile.max_replicas * (u[0] + max(inv) + profile.storage_access_delay)
            / (u[-1] + min(inv)))


# ------------------------------------------------------------- brute force

ORACLE_CAPS = {"layers": 3, "experts": 3, "memory": 4, "replicas": 3, "beta": 8}


@dataclass
class BruteForceResult:
    plan: DeploymentPlan | None
    cost: float
    feasible: bool


def brute_force_optimal(demand: ExpertDemand, profile: PlatformProfile, model: ModelSpec,
                        beta_cap: int = 8, methods: Sequence[int] | None = None,
                        config: PlannerConfig = PlannerConfig()) -> BruteForceResult:
    """Exact optimum by enumeration; ``methods`` restricts every layer's choice.

    Each layer's configurations are enumerated in full and reduced to
    their cost/latency Pareto set, split by whether the layer uses the
    pipelined method and whether some replica load reaches beta (the
    beta range constraint couples layers only through those two facts).
    The product over layers is then checked exhaustively.
    """
    if (model.n_layers > ORACLE_CAPS["layers"] or max(model.experts_per_layer, default=0) > ORACLE_CAPS["experts"]
            or profile.n_memory > ORACLE_CAPS["memory"] or profile.max_replicas > ORACLE_CAPS["replicas"]
            or beta_cap > ORACLE_CAPS["beta"]):
        raise OracleCapError(f"instance exceeds brute-force caps {ORACLE_CAPS}")
    opts = cost_options(config)
    methods = tuple(methods or METHODS)
    G = profile.max_replicas
    limit = model.latency_limit + LATENCY_TOL
    best_cost, best_plan = INF, None
    for beta in range(1, beta_cap + 1):
        if PIPELINED not in methods and beta > 1:
            break
        per_layer = []
        for e, spec in enumerate(model.layers):
            classes: dict = {}
            row = demand.tokens[e]
            grids = [list(itertools.product(range(profile.n_memory), range(1, G + 1)))] * spec.n_experts
            for a in methods:
                for combo in itertools.product(*grids):
                    treps, costs, rs, ok = [], [], [], True
                    for i, (j, g) in enumerate(combo):
                        r = ceil_div(row[i], g)
                        if memory_required(e, i, r, model) > profile.memory_options[j] \
                                or payload_violated(a, r, profile, model, opts):
                            ok = False
                            break
                        rs.append(r)
                        if row[i] > 0:
                            t = replica_time(a, r, head_time(spec.param_mb[i], profile),
                                             profile.unit_compute_time[j], beta, profile, model, opts)
                            treps.append(t)
                            costs.append((g * t) * (profile.memory_options[j] / 1024.0))
                    if not ok:
                        continue
                    billed = 0.0
                    for c in costs:
                        billed += c
                    slowest = max(treps, default=0.0)
                    if a == DIRECT:
                        active_r = [r for r, d in zip(rs, row) if d > 0]
                        lat = (max(active_r, default=0) * model.token_in_mb / profile.function_bandwidth
                               + slowest + spec.nonmoe_load_time)
                    else:
                        gather = profile.storage_access_delay + sum(row) * model.token_out_mb / profile.storage_bandwidth
                        lat = max(slowest, spec.nonmoe_load_time) + gather
                    key = (a == PIPELINED, max(rs, default=0) >= beta)
                    classes.setdefault(key, []).append((billed, lat, a, combo))
            layer_sets = []
            for key, cands in classes.items():
                cands.sort(key=lambda c: (c[0], c[1]))
                kept, best_lat = [], INF
                for c in cands:
                    if c[1] < best_lat:
                        kept.append((key, c))
                        best_lat = c[1]
                layer_sets.extend(kept)
            per_layer.append(layer_sets)
        for pick in itertools.product(*per_layer):
            uses_pipe = any(k[0] for k, _ in pick)
            if uses_pipe and beta > 1 and not any(k[1] for k, _ in pick):
                continue
            if not uses_pipe and beta > 1:
                continue
            t = model.head_time + model.tail_time
            for e, (_, c) in enumerate(pick):
                t += c[1] + model.layers[e].nonmoe_compute_time
            if t > limit:
                continue
            total = 0.0
            for _, c in pick:
                total += c[0]
            if total < best_cost:
                best_cost = total
                best_plan = DeploymentPlan([c[2] for _, c in pick],
                                           [[j for j, _ in c[3]] for _, c in pick],
                                           [[g for _, g in c[3]] for _, c in pick], beta)
    return BruteForceResult(best_plan, best_cost, best_plan is not None)
