"""Synthetic token workloads with feature-driven, Zipf-skewed routing.

Tokens come from a topic mixture: the vocabulary is split into topics,
each sequence has one topic, and each token is drawn from that topic's
Zipf distribution or, otherwise, from the global one.  The attention id
of a token at a layer is the token id of a random topic-drawn peer in
the same sequence, replaced by a uniform random id with a small
probability.

Routing is a pure function of (token id, topic bucket of the attention
id, position bucket, layer, seed).  64-bit mixes of those values give
uniform draws that are pushed through an inverse Zipf CDF over expert
ranks, and a per-layer permutation maps ranks to experts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import WorkloadConfig
from .costmodel import ExpertDemand
from .predictor import FeatureTable

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def splitmix64(x: np.ndarray) -> np.ndarray:
    """Vectorised splitmix64 finaliser on uint64 arrays."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _mix(*parts) -> np.ndarray:
    h = np.uint64(0)
    for p in parts:
        h = splitmix64(np.asarray(p, dtype=np.uint64) ^ h)
    return h


def _uniform(h: np.ndarray) -> np.ndarray:
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return w / w.sum()


@dataclass
class Batch:
    """A block of sequences with ground-truth attention ids and routing."""
    tokens: np.ndarray         # (sequences, seq_len) token ids
    attention: np.ndarray      # (layers, sequences, seq_len) attention ids
    experts: np.ndarray        # (layers, sequences, seq_len, k) routed experts

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.size)

    def token_ids(self) -> np.ndarray:
        return self.tokens.reshape(-1)

    def demand(self, experts_per_layer) -> ExpertDemand:
        rows = []
        for e, n in enumerate(experts_per_layer):
            rows.append(np.bincount(self.experts[e].reshape(-1), minlength=n)[:n].tolist())
        return ExpertDemand(rows)


@dataclass
class SyntheticWorkload:
    config: WorkloadConfig
    seed: int
    experts_per_layer: tuple
    profile_batch: Batch
    batches: list

    def feature_table(self) -> FeatureTable:
        return table_from_batch(self.profile_batch, self.experts_per_layer)


def table_from_batch(batch: Batch, experts_per_layer) -> FeatureTable:
    """Profile a routed batch into a feature table."""
    n_layers, n_seq, seq_len, k = batch.experts.shape
    if batch.n_tokens == 0:
        raise ValueError("profiling needs at least one routing record")
    shape = (n_layers, n_seq, seq_len, k)
    f1 = np.broadcast_to(batch.tokens[None, :, :, None], shape)
    f2 = np.broadcast_to(np.arange(seq_len)[None, None, :, None], shape)
    f3 = np.broadcast_to(batch.attention[:, :, :, None], shape)
    layer = np.broadcast_to(np.arange(n_layers)[:, None, None, None], shape)
    return FeatureTable.from_arrays(experts_per_layer, f1, f2, f3, layer, batch.experts)


class WorkloadGenerator:
    def __init__(self, config: WorkloadConfig, experts_per_layer, seed: int):
        self.config = config
        self.experts_per_layer = tuple(int(n) for n in experts_per_layer)
        if not self.experts_per_layer or min(self.experts_per_layer) < 1:
            raise ValueError("every layer needs at least one expert")
        if any(config.top_k > n for n in self.experts_per_layer):
            raise ValueError("top_k exceeds the expert count of some layer")
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0]))
        V, T = config.vocab_size, config.n_topics
        self.global_p = zipf_weights(V, config.token_zipf)[rng.permutation(V)]
        self.topic_of = np.arange(V) % T
        self.topic_tokens = [np.flatnonzero(self.topic_of == t) for t in range(T)]
        self.topic_p = [zipf_weights(len(ids), config.token_zipf)[rng.permutation(len(ids))]
                        for ids in self.topic_tokens]
        self.rank_cdf = [np.cumsum(zipf_weights(n, config.skew)) for n in self.experts_per_layer]
        self.rank_to_expert = [rng.permutation(n) for n in self.experts_per_layer]

    def _sequences(self, n_seq: int, topic_mix: np.ndarray, rng):
        """Token ids plus a mask of the tokens drawn from the sequence topic."""
        cfg = self.config
        topics = rng.choice(cfg.n_topics, size=n_seq, p=topic_mix)
        out = np.empty((n_seq, cfg.seq_len), dtype=np.int64)
        content = np.empty((n_seq, cfg.seq_len), dtype=bool)
        for s, t in enumerate(topics):
            own = rng.random(cfg.seq_len) < cfg.topic_strength
            glob = rng.choice(cfg.vocab_size, size=cfg.seq_len, p=self.global_p)
            loc = self.topic_tokens[t][rng.choice(len(self.topic_tokens[t]), size=cfg.seq_len,
                                                  p=self.topic_p[t])]
            out[s] = np.where(own, loc, glob)
            content[s] = own
        return out, content

    def _attention(self, tokens: np.ndarray, content: np.ndarray, rng) -> np.ndarray:
        """Per-layer attention ids: a random topic-drawn peer in the same sequence."""
        cfg = self.config
        n_layers = len(self.experts_per_layer)
        n_seq, L = tokens.shape
        att = np.empty((n_layers, n_seq, L), dtype=np.int64)
        for e in range(n_layers):
            for s in range(n_seq):
                pool = tokens[s][content[s]] if content[s].any() else tokens[s]
                att[e, s] = pool[rng.integers(0, len(pool), size=L)]
            noise = rng.random((n_seq, L)) < cfg.attention_noise
            att[e] = np.where(noise, rng.integers(0, cfg.vocab_size, size=(n_seq, L)), att[e])
        return att

    def _zipf_order(self, h: np.ndarray, n: int, m: int, weights: np.ndarray) -> np.ndarray:
        """First ``m`` ranks of a Zipf draw without replacement, one per hash."""
        shape = h.shape
        taken = np.zeros(shape + (n,), dtype=bool)
        out = np.empty(shape + (m,), dtype=np.int64)
        for kk in range(m):
            u = _uniform(splitmix64(h ^ np.uint64(kk + 1)))
            cdf = np.cumsum(np.where(taken, 0.0, weights), axis=-1)
            rank = np.minimum((cdf < (u * cdf[..., -1])[..., None]).sum(axis=-1), n - 1)
            np.put_along_axis(taken, rank[..., None], True, axis=-1)
            out[..., kk] = rank
        return out

    def route(self, tokens: np.ndarray, attention: np.ndarray) -> np.ndarray:
        """Top-k experts of every token at every layer (deterministic).

        Each token id has a home ordering of experts drawn from the Zipf
        rank distribution.  The context (topic bucket of the attention id
        and position bucket) decides which of the first two leads, the
        second winning with probability ``2 * swap_rate * w2 / (w1 + w2)``
        for Zipf weights ``w``; with probability ``route_noise`` the
        context replaces the ordering altogether.
        """
        cfg = self.config
        n_seq, L = tokens.shape
        k = cfg.top_k
        vocab = np.arange(cfg.vocab_size, dtype=np.uint64)
        pos_bucket = np.broadcast_to((np.arange(L) * cfg.position_buckets // L)[None, :], tokens.shape)
        out = np.empty((len(self.experts_per_layer), n_seq, L, k), dtype=np.int64)
        for e, n in enumerate(self.experts_per_layer):
            weights = zipf_weights(n, cfg.skew)
            m = min(n, max(k, 2))
            home = self._zipf_order(_mix(vocab, e, self.seed, 1), n, m, weights)[tokens]
            f3b = self.topic_of[attention[e]] % cfg.f3_buckets
            ctx = _mix(tokens, f3b, pos_bucket, e, self.seed, 2)
            if n >= 2:
                first, second = home[..., 0].copy(), home[..., 1].copy()
                p_second = cfg.swap_rate * 2 * weights[second] / (weights[first] + weights[second])
                swap = _uniform(splitmix64(ctx ^ np.uint64(0xA5))) < p_second
                home[..., 0] = np.where(swap, second, first)
                home[..., 1] = np.where(swap, first, second)
            stray = _uniform(splitmix64(ctx ^ np.uint64(0x5A))) < cfg.route_noise
            if stray.any():
                alt = self._zipf_order(ctx[stray], n, m, weights)
                home[stray] = alt
            out[e] = self.rank_to_expert[e][home[..., :k]]
        return out

    def batch(self, n_tokens: int, topic_mix: np.ndarray, rng) -> Batch:
        n_seq = -(-n_tokens // self.config.seq_len) if n_tokens else 0
        tokens, content = self._sequences(n_seq, topic_mix, rng)
        att = self._attention(tokens, content, rng)
        return Batch(tokens, att, self.route(tokens, att))

    def topic_mix(self, rng, concentration: float) -> np.ndarray:
        return rng.dirichlet(np.full(self.config.n_topics, concentration))


def generate_workload(config: WorkloadConfig, experts_per_layer, seed: int,
                      n_batches: int | None = None) -> SyntheticWorkload:
    """Profiling sample plus ``n_batches`` serving batches, all seeded.

    The profiling sample mixes topics evenly; each serving batch draws a
    concentrated topic mixture, so serving batches drift from the profile.
    """
    gen = WorkloadGenerator(config, experts_per_layer, seed)
    n_batches = config.n_batches if n_batches is None else n_batches
    children = np.random.SeedSequence([int(seed), 1]).spawn(n_batches + 1)
    prng = np.random.default_rng(children[0])
    even = np.full(config.n_topics, 1.0 / config.n_topics)
    profile_batch = gen.batch(config.profile_sequences * config.seq_len, even, prng)
    batches = []
    for child in children[1:]:
        rng = np.random.default_rng(child)
        batches.append(gen.batch(config.batch_tokens, gen.topic_mix(rng, config.batch_topic_concentration), rng))
    return SyntheticWorkload(config, int(seed), gen.experts_per_layer, profile_batch, batches)
