import random

import pytest
from hypothesis import given, settings, strategies as st

from faasmoe.costmodel import ExpertDemand
from faasmoe.predictor import (FeatureTable, NewBatchStats, TokenFeature, accuracy, posterior,
                               posterior_token_id_only, predict, predict_demand, profile,
                               read_batch_csv, top_k, write_batch_csv)

from helpers import oracle_scores


def records_table(records, experts=(2,)):
    return profile([(TokenFeature(a, b, c), e, i) for a, b, c, e, i in records], experts)


HAND = [(7, 0, 1, 0, 0)] * 3 + [(7, 0, 2, 0, 1)] * 1 + [(7, 1, 1, 0, 1)] * 2 + \
       [(7, 1, 2, 0, 0)] * 5 + [(7, 1, 2, 0, 1)] * 1 + [(9, 0, 1, 0, 1)] * 4


class TestPosterior:
    def test_degenerate_conditional(self):
        t = records_table([(5, p, a, 0, 1) for p in range(3) for a in range(2)])
        stats = NewBatchStats.from_tokens([0, 1, 5], 3)
        assert posterior(t, stats, 0, 5).scores == (0.0, 1.0)

    def test_symmetric_tie_goes_low(self):
        t = records_table([(5, 0, 1, 0, 0), (5, 0, 1, 0, 1)])
        stats = NewBatchStats.from_tokens([1, 5], 4)
        v = posterior(t, stats, 0, 5)
        assert v.scores[0] == v.scores[1]
        assert predict(t, stats, 0, 5) == [0]

    def test_hand_table_matches_oracle(self):
        t = records_table(HAND)
        f3_freq = {1: 0.3, 2: 0.7}
        stats = NewBatchStats(f3_freq, 2)
        got = posterior(t, stats, 0, 7).scores
        want = oracle_scores(HAND, f3_freq, 2, 0, 7, 2)
        assert got == pytest.approx(want, abs=1e-12)

    def test_unseen_token_falls_back_to_popularity(self):
        t = records_table(HAND)
        v = posterior(t, NewBatchStats.from_tokens([1, 2], 2), 0, 12345)
        assert v.fallback
        assert v.scores == pytest.approx((8 / 16, 8 / 16))

    def test_context_absent_from_batch_uses_token_conditional(self):
        t = records_table(HAND)
        stats = NewBatchStats.from_tokens([99], 2)
        v = posterior(t, stats, 0, 7)
        assert v.fallback and v.scores == posterior_token_id_only(t, stats, 0, 7).scores

    def test_same_token_split_by_context(self):
        # one id, two attention contexts routed to different experts
        recs = [(10, 0, 1, 0, 0)] * 4 + [(10, 0, 2, 0, 1)] * 4
        t = records_table(recs)
        assert predict(t, NewBatchStats({1: 0.9, 2: 0.1}, 1), 0, 10) == [0]
        assert predict(t, NewBatchStats({1: 0.1, 2: 0.9}, 1), 0, 10) == [1]

    def test_empty_table_rejected(self):
        with pytest.raises(ValueError):
            posterior(FeatureTable([2]), NewBatchStats({1: 1.0}, 1), 0, 1)


class TestPredict:
    def test_k_bounds(self):
        with pytest.raises(ValueError):
            top_k([0.5, 0.5], 3)
        with pytest.raises(ValueError):
            top_k([0.5, 0.5], 0)

    def test_all_experts_sorted(self):
        assert top_k([0.1, 0.4, 0.2, 0.3], 4) == [1, 3, 2, 0]

    def test_single_token_batch(self):
        t = records_table(HAND, experts=(2,))
        d = predict_demand(t, [7], seq_len=2)
        assert sum(d.tokens[0]) == 1 and max(d.tokens[0]) == 1

    def test_k2_counting_identity(self):
        recs = [(t, 0, t % 3, e, (t + e) % 4) for t in range(20) for e in range(2)]
        table = records_table(recs, experts=(4, 4))
        d = predict_demand(table, list(range(30)) * 3, k=2, seq_len=8)
        assert all(sum(row) == 2 * 90 for row in d.tokens)

    def test_large_batch_matches_token_tally(self):
        from faasmoe.config import WorkloadConfig
        from faasmoe.workload import generate_workload
        w = generate_workload(WorkloadConfig(), (4,) * 2, seed=3, n_batches=1)
        table = w.feature_table()
        ids = w.batches[0].token_ids().tolist()
        assert len(ids) == 10240
        stats = NewBatchStats.from_tokens(ids, 128)
        got = predict_demand(table, ids, stats=stats)
        tally = [[0] * 4 for _ in range(2)]
        cache = {}
        for tok in ids:
            for layer in range(2):
                if (tok, layer) not in cache:
                    cache[(tok, layer)] = predict(table, stats, layer, tok)[0]
                tally[layer][cache[(tok, layer)]] += 1
        assert [list(r) for r in got.tokens] == tally


class TestAccuracy:
    def test_identical(self):
        d = ExpertDemand([[1, 2, 3]])
        assert accuracy(d, d).mean == 0.0

    def test_swap(self):
        assert accuracy(ExpertDemand([[10, 0, 0, 0]]), ExpertDemand([[0, 10, 0, 0]])).mean == 5.0

    def test_topology_mismatch(self):
        with pytest.raises(ValueError):
            accuracy(ExpertDemand([[1, 2]]), ExpertDemand([[1, 2, 3]]))


class TestTable:
    def test_csv_round_trip(self, tmp_path):
        t = records_table(HAND)
        t.to_csv(tmp_path / "t.csv", "hdr")
        back = FeatureTable.from_csv(tmp_path / "t.csv", (2,))
        assert back.counts == t.counts and back.marginals_consistent()

    def test_batch_csv_round_trip(self, tmp_path):
        seqs = [[3, 1, 4], [1, 5, 9]]
        write_batch_csv(tmp_path / "b.csv", seqs)
        assert read_batch_csv(tmp_path / "b.csv") == seqs

    def test_bad_key_rejected(self):
        t = FeatureTable([2])
        with pytest.raises((IndexError, ValueError)):
            t.add((1, 0, 0, 1, 0))
        with pytest.raises((IndexError, ValueError)):
            t.add((1, 0, 0, 0, 2))

    def test_from_arrays_matches_profile(self):
        recs = HAND
        cols = list(zip(*recs))
        a = FeatureTable.from_arrays((2,), *cols)
        b = records_table(recs)
        assert a.counts == b.counts and a.m123 == b.m123 and a.marginals_consistent()

    def test_override_copy_leaves_source(self):
        t = records_table(HAND)
        before = dict(t.counts)
        u = t.with_overrides([((7, 0, 1, 0, 0), 40), ((1, 1, 1, 0, 1), 2)])
        assert t.counts == before and t.marginals_consistent()
        assert u.get((7, 0, 1, 0, 0)) == 40 and u.marginals_consistent()


# ---------------------------------------------------------------- properties

record = st.tuples(st.integers(0, 4), st.integers(0, 2), st.integers(0, 3), st.integers(0, 1),
                   st.integers(0, 2))


@settings(max_examples=60, deadline=None)
@given(recs=st.lists(record, min_size=1, max_size=40),
       edits=st.lists(st.tuples(record, st.integers(1, 5)), max_size=10))
def test_marginals_stay_consistent(recs, edits):
    t = records_table(recs, experts=(3, 3))
    for key, v in edits:
        t.set_count(key, v)
    assert t.marginals_consistent()


@settings(max_examples=60, deadline=None)
@given(recs=st.lists(record, min_size=1, max_size=40), seq_len=st.integers(1, 40),
       scale3=st.floats(0.1, 10), batch=st.lists(st.integers(0, 4), min_size=1, max_size=20),
       f1=st.integers(0, 4))
def test_argmax_invariant_to_prior_scale(recs, seq_len, scale3, batch, f1):
    t = records_table(recs, experts=(3, 3))
    base = NewBatchStats.from_tokens(batch, 3)
    scaled = NewBatchStats({k: v * scale3 for k, v in base.f3_freq.items()}, seq_len)
    assert predict(t, base, 0, f1, 3) == predict(t, scaled, 0, f1, 3) or \
        posterior(t, base, 0, f1).scores == pytest.approx(posterior(t, scaled, 0, f1).scores, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(recs=st.lists(record, min_size=1, max_size=40),
       batch=st.lists(st.integers(0, 4), min_size=1, max_size=20), f1=st.integers(0, 6))
def test_top1_inside_top2(recs, batch, f1):
    t = records_table(recs, experts=(3, 3))
    stats = NewBatchStats.from_tokens(batch, 4)
    assert predict(t, stats, 1, f1, 1)[0] in predict(t, stats, 1, f1, 2)


@settings(max_examples=30, deadline=None)
@given(recs=st.lists(record, min_size=1, max_size=30),
       batch=st.lists(st.integers(0, 4), min_size=1, max_size=20))
def test_posterior_matches_oracle(recs, batch):
    t = records_table(recs, experts=(3, 3))
    stats = NewBatchStats.from_tokens(batch, 3)
    for f1 in {r[0] for r in recs if r[3] == 0}:
        v = posterior(t, stats, 0, f1)
        if v.fallback:
            continue
        assert v.scores == pytest.approx(oracle_scores(recs, stats.f3_freq, 3, 0, f1, 3), abs=1e-12)
