"""Expert-popularity prediction from token features.

Profiled routing records are counted in a key-value table keyed by
``(token_id, position_id, attention_id, layer, expert)``.  For a token
that has not been through the gate only its token id is known; the
posterior marginalises position and attention id, weighting attention
ids by their frequency in the batch about to be served.
"""
from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

from .costmodel import ExpertDemand

Key = tuple  # (f1, f2, f3, layer, expert)


@dataclass(frozen=True)
class TokenFeature:
    token_id: int
    position_id: int
    attention_id: int


class FeatureTable:
    """Routing counts plus the marginals the posterior needs.

    Marginals over ``f1``, ``(f1, f2)`` and ``(f1, f2, f3)`` sum over all
    layers and experts.  Copies made with :meth:`copy` share per-token
    buckets until one of them writes, so overriding a few keys of a large
    table is cheap.
    """

    def __init__(self, experts_per_layer: Sequence[int]):
        self.experts_per_layer = tuple(int(n) for n in experts_per_layer)
        self.counts: dict = {}
        self.m1: dict = {}
        self.m12: dict = {}
        self.m123: dict = {}
        self.expert_totals: dict = {}
        self.total = 0
        self._buckets: dict = {}      # (layer, f1) -> {(f2, f3, expert): count}
        self._owned: set = set()

    def __len__(self) -> int:
        return len(self.counts)

    def __contains__(self, key) -> bool:
        return key in self.counts

    def get(self, key, default: int = 0) -> int:
        return self.counts.get(key, default)

    def _check_key(self, key):
        f1, f2, f3, layer, expert = key
        if not 0 <= layer < len(self.experts_per_layer):
            raise IndexError(f"layer {layer} out of range")
        if not 0 <= expert < self.experts_per_layer[layer]:
            raise IndexError(f"expert {expert} out of range for layer {layer}")

    def _bump(self, key, delta: int):
        f1, f2, f3, layer, expert = key
        self.m1[f1] = self.m1.get(f1, 0) + delta
        self.m12[(f1, f2)] = self.m12.get((f1, f2), 0) + delta
        self.m123[(f1, f2, f3)] = self.m123.get((f1, f2, f3), 0) + delta
        self.expert_totals[(layer, expert)] = self.expert_totals.get((layer, expert), 0) + delta
        self.total += delta
        for d, k in ((self.m1, f1), (self.m12, (f1, f2)), (self.m123, (f1, f2, f3))):
            if d[k] == 0:
                del d[k]
        bkey = (layer, f1)
        bucket = self._buckets.get(bkey)
        if bucket is None:
            bucket = self._buckets[bkey] = {}
            self._owned.add(bkey)
        elif bkey not in self._owned:
            bucket = self._buckets[bkey] = dict(bucket)
            self._owned.add(bkey)
        sub = (f2, f3, expert)
        new = bucket.get(sub, 0) + delta
        if new:
            bucket[sub] = new
        else:
            del bucket[sub]

    def add(self, key: Key, count: int = 1):
        key = tuple(int(k) for k in key)
        self._check_key(key)
        if count < 1:
            raise ValueError("counts are positive")
        self.counts[key] = self.counts.get(key, 0) + count
        self._bump(key, count)

    def set_count(self, key: Key, value: int):
        """Overwrite one key; ``value`` must be a positive integer."""
        key = tuple(int(k) for k in key)
        self._check_key(key)
        value = int(value)
        if value < 1:
            raise ValueError("counts are positive")
        delta = value - self.counts.get(key, 0)
        if delta:
            self.counts[key] = value
            self._bump(key, delta)

    def copy(self) -> "FeatureTable":
        out = FeatureTable(self.experts_per_layer)
        out.counts = dict(self.counts)
        out.m1, out.m12, out.m123 = dict(self.m1), dict(self.m12), dict(self.m123)
        out.expert_totals = dict(self.expert_totals)
        out.total = self.total
        out._buckets = dict(self._buckets)
        return out

    def with_overrides(self, pairs: Iterable) -> "FeatureTable":
        out = self.copy()
        for key, value in pairs:
            out.set_count(key, value)
        return out

    def bucket(self, layer: int, f1: int) -> dict:
        return self._buckets.get((layer, f1), {})

    def keys_for_layer(self, layer: int):
        return [k for k in self.counts if k[3] == layer]

    def marginals_consistent(self) -> bool:
        """Recompute every marginal by a full scan and compare."""
        m1, m12, m123, et = Counter(), Counter(), Counter(), Counter()
        buckets = defaultdict(dict)
        for (f1, f2, f3, layer, expert), c in self.counts.items():
            if c < 1:
                return False
            m1[f1] += c
            m12[(f1, f2)] += c
            m123[(f1, f2, f3)] += c
            et[(layer, expert)] += c
            buckets[(layer, f1)][(f2, f3, expert)] = c
        live = {k: v for k, v in self._buckets.items() if v}
        return (dict(m1) == self.m1 and dict(m12) == self.m12 and dict(m123) == self.m123
                and {k: v for k, v in self.expert_totals.items() if v} == dict(et)
                and sum(self.counts.values()) == self.total and live == dict(buckets))

    @classmethod
    def from_arrays(cls, experts_per_layer: Sequence[int], f1, f2, f3, layer, expert,
                    counts=None) -> "FeatureTable":
        """Bulk constructor from parallel integer arrays (one entry per record)."""
        import numpy as np
        cols = [np.asarray(c, dtype=np.int64).reshape(-1) for c in (f1, f2, f3, layer, expert)]
        w = np.ones(cols[0].size, dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64)
        if w.size and w.min() < 1:
            raise ValueError("counts are positive")
        table = cls(experts_per_layer)
        if not cols[0].size:
            return table
        if cols[3].min() < 0 or cols[3].max() >= len(table.experts_per_layer):
            raise IndexError("layer out of range")
        if (cols[4] < 0).any() or (cols[4] >= np.asarray(table.experts_per_layer)[cols[3]]).any():
            raise IndexError("expert out of range")

        radix = [int(c.max()) + 1 for c in cols]
        if min(int(c.min()) for c in cols) < 0 or math.prod(radix) >= 2 ** 62:
            raise ValueError("feature ids must be non-negative and fit a 62-bit key")

        def group(idx):
            code = np.zeros(cols[0].size, dtype=np.int64)
            for k in idx:
                code = code * radix[k] + cols[k]
            uniq, inv = np.unique(code, return_inverse=True)
            sums = np.bincount(inv, weights=w, minlength=len(uniq)).astype(np.int64)
            parts = []
            rest = uniq
            for k in reversed(idx):
                parts.append(rest % radix[k])
                rest = rest // radix[k]
            keys = np.stack(parts[::-1], axis=1)
            return keys.tolist(), sums.tolist()

        keys, sums = group((0, 1, 2, 3, 4))
        table.counts = {tuple(k): c for k, c in zip(keys, sums)}
        k1, s1 = group((0,))
        table.m1 = {k[0]: c for k, c in zip(k1, s1)}
        k12, s12 = group((0, 1))
        table.m12 = {tuple(k): c for k, c in zip(k12, s12)}
        k123, s123 = group((0, 1, 2))
        table.m123 = {tuple(k): c for k, c in zip(k123, s123)}
        ket, set_ = group((3, 4))
        table.expert_totals = {tuple(k): c for k, c in zip(ket, set_)}
        table.total = int(w.sum())
        for (a, b, c, e, i), n in zip(keys, sums):
            bucket = table._buckets.get((e, a))
            if bucket is None:
                bucket = table._buckets[(e, a)] = {}
                table._owned.add((e, a))
            bucket[(b, c, i)] = n
        return table

    # -- CSV ---------------------------------------------------------------
    def to_csv(self, path, header_comment: str | None = None):
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(("f1", "f2", "f3", "layer", "expert", "count"))
            for key in sorted(self.counts):
                w.writerow((*key, self.counts[key]))

    @classmethod
    def from_csv(cls, path, experts_per_layer: Sequence[int]) -> "FeatureTable":
        table = cls(experts_per_layer)
        with open(path, newline="") as fh:
            rows = csv.reader(line for line in fh if not line.startswith("#"))
            header = next(rows, None)
            if header != ["f1", "f2", "f3", "layer", "expert", "count"]:
                raise ValueError(f"{path}: unexpected header {header}")
            for row in rows:
                *key, count = (int(x) for x in row)
                table.add(tuple(key), count)
        return table


def profile(records: Iterable, experts_per_layer: Sequence[int]) -> FeatureTable:
    """Count routing records ``(TokenFeature, layer, experts)``.

    ``experts`` may be one index or an iterable of indices (top-k routing).
    """
    table = FeatureTable(experts_per_layer)
    for feat, layer, experts in records:
        if isinstance(experts, int):
            experts = (experts,)
        for expert in experts:
            table.add((feat.token_id, feat.position_id, feat.attention_id, layer, expert))
    if not table.total:
        raise ValueError("profiling needs at least one routing record")
    return table


@dataclass(frozen=True)
class NewBatchStats:
    """Feature statistics of a batch that has not been through the gate."""
    f3_freq: dict             # token id -> relative frequency in the batch
    seq_len: int

    @classmethod
    def from_tokens(cls, token_ids: Iterable[int], seq_len: int) -> "NewBatchStats":
        counts = Counter(int(t) for t in token_ids)
        n = sum(counts.values())
        if n == 0:
            raise ValueError("empty batch")
        if seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        return cls({t: c / n for t, c in counts.items()}, int(seq_len))


@dataclass(frozen=True)
class PosteriorVector:
    scores: tuple             # normalised, sums to 1
    fallback: bool = False


def _popularity(table: FeatureTable, layer: int) -> PosteriorVector:
    n = table.experts_per_layer[layer]
    raw = [float(table.expert_totals.get((layer, i), 0)) for i in range(n)]
    s = sum(raw)
    if s <= 0:
        return PosteriorVector(tuple([1.0 / n] * n), True)
    return PosteriorVector(tuple(x / s for x in raw), True)


def _normalised(raw: list) -> tuple:
    s = sum(raw)
    return tuple(x / s for x in raw)


def posterior(table: FeatureTable, stats: NewBatchStats, layer: int, f1: int) -> PosteriorVector:
    """Score every expert of ``layer`` for a token with id ``f1``.

    Each observed ``(f2, f3)`` context contributes the profiled conditional
    ``P*(i | f1, f2, f3)`` weighted by ``P*(f1,f2,f3) P'(f3) / P*(f1,f2)``
    and ``P*(f1,f2) P'(f2) / P*(f1)``, where ``P'(f2)`` is uniform over the
    sequence and ``P'(f3)`` is the batch frequency.  An unseen ``f1`` falls
    back to the layer's expert popularity; a seen ``f1`` none of whose
    profiled attention ids occur in the batch falls back to ``P*(i | f1)``.
    """
    if not table.total:
        raise ValueError("empty feature table")
    n = table.experts_per_layer[layer]
    bucket = table.bucket(layer, f1)
    if not bucket:
        return _popularity(table, layer)
    N = float(table.total)
    pf2 = 1.0 / stats.seq_len
    p1 = table.m1[f1] / N
    ctx_total: dict = {}
    for (f2, f3, _), c in bucket.items():
        ctx_total[(f2, f3)] = ctx_total.get((f2, f3), 0) + c
    scores = [0.0] * n
    for (f2, f3, i), c in bucket.items():
        pf3 = stats.f3_freq.get(f3, 0.0)
        if pf3 == 0.0:
            continue
        p123 = table.m123[(f1, f2, f3)] / N
        p12 = table.m12[(f1, f2)] / N
        scores[i] += (c / ctx_total[(f2, f3)]) * (p123 * pf3 / p12) * (p12 * pf2 / p1)
    if sum(scores) <= 0.0:
        # no profiled context of f1 occurs in this batch: drop the batch weighting
        return PosteriorVector(posterior_token_id_only(table, stats, layer, f1).scores, True)
    return PosteriorVector(_normalised(scores))


def posterior_token_id_only(table: FeatureTable, stats: NewBatchStats | None,
                            layer: int, f1: int) -> PosteriorVector:
    """Baseline that conditions on the token id alone, ``P*(i | f1)``."""
    n = table.experts_per_layer[layer]
    bucket = table.bucket(layer, f1)
    if not bucket:
        return _popularity(table, layer)
    scores = [0.0] * n
    for (_, _, i), c in bucket.items():
        scores[i] += c
    return PosteriorVector(_normalised(scores))


def top_k(scores: Sequence[float], k: int) -> list:
    """Indices of the ``k`` largest scores; ties go to the lower index."""
    if not 1 <= k <= len(scores):
        raise ValueError(f"k={k} outside [1, {len(scores)}]")
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]


def predict(table: FeatureTable, stats: NewBatchStats, layer: int, f1: int, k: int = 1,
            scorer=posterior) -> list:
    return top_k(scorer(table, stats, layer, f1).scores, k)


def predict_demand(table: FeatureTable, token_ids: Iterable, k: int = 1,
                   stats: NewBatchStats | None = None, seq_len: int | None = None,
                   scorer=posterior) -> ExpertDemand:
    """Predicted tokens per (layer, expert) for a batch of token ids.

    Every token adds one to each of its ``k`` predicted experts, so each
    layer's counts sum to ``k * len(batch)``.
    """
    ids = [t.token_id if isinstance(t, TokenFeature) else int(t) for t in token_ids]
    if not ids:
        raise ValueError("empty batch")
    if stats is None:
        if seq_len is None:
            raise ValueError("give either stats or seq_len")
        stats = NewBatchStats.from_tokens(ids, seq_len)
    freq = Counter(ids)
    rows = []
    for layer, n in enumerate(table.experts_per_layer):
        counts = [0] * n
        for f1 in sorted(freq):
            for i in predict(table, stats, layer, f1, k, scorer):
                counts[i] += freq[f1]
        rows.append(counts)
    return ExpertDemand(rows)


@dataclass(frozen=True)
class AccuracyReport:
    per_layer: tuple          # mean absolute difference per expert, per layer
    mean: float


def accuracy(predicted: ExpertDemand, truth: ExpertDemand) -> AccuracyReport:
    if predicted.shape != truth.shape:
        raise ValueError(f"topology mismatch: {predicted.shape} vs {truth.shape}")
    per_layer = []
    for p_row, t_row in zip(predicted.tokens, truth.tokens):
        per_layer.append(sum(abs(p - t) for p, t in zip(p_row, t_row)) / len(p_row))
    mean = sum(per_layer) / len(per_layer) if per_layer else 0.0
    return AccuracyReport(tuple(per_layer), mean)


# ----------------------------------------------------------- batch files

def write_batch_csv(path, sequences: Sequence[Sequence[int]], header_comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(("sequence_id", "position", "token_id"))
        for s, seq in enumerate(sequences):
            for p, tok in enumerate(seq):
                w.writerow((s, p, int(tok)))


def read_batch_csv(path) -> list:
    seqs: dict = defaultdict(dict)
    with open(path, newline="") as fh:
        rows = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(rows, None)
        if header != ["sequence_id", "position", "token_id"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for s, p, t in rows:
            seqs[int(s)][int(p)] = int(t)
    return [[seqs[s][p] for p in sorted(seqs[s])] for s in sorted(seqs)]
