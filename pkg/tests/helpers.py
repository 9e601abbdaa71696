"""Random instance builders shared by the oracle and acceptance tests."""
from __future__ import annotations

import random

from faasmoe.config import LayerSpec, ModelSpec, PlatformProfile
from faasmoe.costmodel import ExpertDemand

MENU = (128, 768, 1152, 1536, 1920, 2304, 2688, 3072)

ACCEPTANCE: dict = {}     # criterion number -> summary line, printed at session end


def random_instance(seed: int, max_layers=3, max_experts=3, max_memory=4, max_replicas=3,
                    max_tokens=24):
    """A brute-forceable (profile, model, demand) triple."""
    rng = random.Random(seed)
    n_mem = rng.randint(2, max_memory)
    mem = sorted(rng.sample(MENU, n_mem))
    base = rng.uniform(0.005, 0.05)
    expo = rng.uniform(0.3, 1.0)
    unit = [base * (mem[0] / m) ** expo for m in mem]
    profile = PlatformProfile(
        storage_bandwidth=rng.uniform(20, 100), function_bandwidth=rng.uniform(10, 80),
        warm_start_time=rng.uniform(0.05, 0.5), storage_access_delay=rng.uniform(0.01, 0.1),
        payload_limit=rng.uniform(1.0, 6.0), memory_options=mem, unit_compute_time=unit,
        max_replicas=rng.randint(1, max_replicas))
    n_layers = rng.randint(1, max_layers)
    layers, tokens = [], []
    for _ in range(n_layers):
        n = rng.randint(1, max_experts)
        layers.append(LayerSpec(param_mb=[rng.uniform(10, 300) for _ in range(n)],
                                intermediate_mb=[rng.uniform(0, 300) for _ in range(n)],
                                nonmoe_compute_time=rng.uniform(0.05, 0.5),
                                nonmoe_load_time=rng.uniform(0.1, 3.0)))
        tokens.append([rng.choice([0, rng.randint(1, max_tokens)]) if rng.random() < 0.3
                       else rng.randint(1, max_tokens) for _ in range(n)])
    head, tail = rng.uniform(0.1, 2), rng.uniform(0.1, 2)
    floor = head + tail + sum(l.nonmoe_compute_time for l in layers)
    token_mb = rng.uniform(0.02, 0.4)
    model = ModelSpec(layers=layers, head_time=head, tail_time=tail, token_in_mb=token_mb,
                      token_out_mb=token_mb * rng.uniform(0.5, 1.5),
                      latency_limit=floor + rng.uniform(2.0, 14.0) * n_layers)
    return profile, model, ExpertDemand(tokens)


def small_profile(**kw):
    base = dict(storage_bandwidth=100.0, function_bandwidth=50.0, warm_start_time=0.5,
                storage_access_delay=0.1, payload_limit=6.0, memory_options=(1152, 3072),
                unit_compute_time=(0.008, 0.004), max_replicas=4, billing_granularity_s=0.001)
    base.update(kw)
    return PlatformProfile(**base)


def small_model(n_experts=2, n_layers=1, param_mb=100.0, intermediate_mb=50.0, token_mb=0.01,
                latency_limit=100.0, **kw):
    layer = LayerSpec(param_mb=[param_mb] * n_experts, intermediate_mb=[intermediate_mb] * n_experts,
                      nonmoe_compute_time=kw.pop("nonmoe_compute_time", 0.2),
                      nonmoe_load_time=kw.pop("nonmoe_load_time", 1.0))
    return ModelSpec(layers=[layer] * n_layers, head_time=kw.pop("head_time", 1.0),
                     tail_time=kw.pop("tail_time", 1.0), token_in_mb=kw.pop("token_in_mb", token_mb),
                     token_out_mb=kw.pop("token_out_mb", token_mb), latency_limit=latency_limit)


def oracle_scores(records, f3_freq, seq_len, layer, f1, n_experts):
    """Double sum evaluated straight from the raw record list."""
    N = len(records)
    p = lambda pred: sum(1 for r in records if pred(r)) / N
    scores = []
    for i in range(n_experts):
        s = 0.0
        for f2 in sorted({r[1] for r in records}):
            for f3 in sorted({r[2] for r in records}):
                ctx = [r for r in records if r[0] == f1 and r[1] == f2 and r[2] == f3 and r[3] == layer]
                if not ctx:
                    continue
                cond = sum(1 for r in ctx if r[4] == i) / len(ctx)
                p123 = p(lambda r: r[0] == f1 and r[1] == f2 and r[2] == f3)
                p12 = p(lambda r: r[0] == f1 and r[1] == f2)
                p1 = p(lambda r: r[0] == f1)
                s += cond * (p123 * f3_freq.get(f3, 0.0) / p12) * (p12 * (1 / seq_len) / p1)
        scores.append(s)
    tot = sum(scores)
    return [x / tot for x in scores]
