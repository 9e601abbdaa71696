import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faasmoe import bo
from faasmoe.config import (ConfigError, PlannerConfig, TunerConfig, WorkloadConfig,
                            canonical_model, canonical_profile)
from faasmoe.sim import MEMORY_OVERFLOW, MISPREDICT, PAYLOAD_OVERFLOW, FeedbackEvent
from faasmoe.workload import generate_workload


@pytest.fixture(scope="module")
def world():
    profile = canonical_profile()
    model = canonical_model(n_layers=2, n_experts=4, latency_limit=30.0)
    w = generate_workload(WorkloadConfig(batch_tokens=512, profile_sequences=8, n_batches=2),
                          model.experts_per_layer, seed=4)
    return profile, model, w


def small_cfg(**kw):
    base = dict(Q=40, batches=2, max_iterations=12)
    base.update(kw)
    return TunerConfig(**base)


def tune(world, cfg, seed=0):
    profile, model, w = world
    return bo.run(w.feature_table(), w.batches, profile, model, cfg, PlannerConfig(), seed=seed,
                  vocab_size=w.config.vocab_size, seq_len=w.config.seq_len)


class TestEpsilon:
    def test_decay(self):
        assert bo.decay_epsilon(0.4, 1.0, 1) == pytest.approx(0.2)
        assert bo.decay_epsilon(0.4, 1.0, 0) == 0.4

    def test_decay_preconditions(self):
        with pytest.raises(ValueError):
            bo.decay_epsilon(0.4, 0.0, 1)

    def test_decay_strictly_decreasing(self):
        vals = [float(bo.decay_epsilon(0.3, 0.7, t)) for t in range(1, 101)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_slow_and_fast_blocks(self):
        cfg = TunerConfig(rho=0.5, rho1=0.2, rho2=0.15, rho3=0.05, mu=0.5)
        eps = bo.EpsilonVector.initial(1.0, 10, 0.5).decayed(cfg.rho, 4)
        out, _ = bo.apply_feedback([FeedbackEvent(0, 0, MEMORY_OVERFLOW, 1)], eps, 4, cfg)
        assert out.values[:5] == pytest.approx([0.6] * 5)
        assert out.values[5:] == pytest.approx([1 / 3] * 5)

    def test_no_events_leave_decay(self):
        eps = bo.EpsilonVector.initial(0.2, 6, 0.5).decayed(0.5, 3)
        out, floors = bo.apply_feedback([], eps, 3, TunerConfig())
        assert np.array_equal(out.values, eps.values) and floors == {}

    def test_largest_rate_wins_once(self):
        cfg = TunerConfig()
        eps = bo.EpsilonVector.initial(0.2, 4, 0.5)
        events = [FeedbackEvent(0, 0, PAYLOAD_OVERFLOW, 2), FeedbackEvent(0, 1, MEMORY_OVERFLOW, 2),
                  FeedbackEvent(1, 1, MISPREDICT, 1)]
        out, _ = bo.apply_feedback(events, eps, 2, cfg)
        assert out.values[0] == pytest.approx(0.2 * (1 + cfg.rho1 * 2))

    def test_per_event_variant_compounds(self):
        cfg = TunerConfig(per_event_feedback=True)
        eps = bo.EpsilonVector.initial(0.2, 4, 0.5)
        events = [FeedbackEvent(0, 0, MEMORY_OVERFLOW, 1)] * 3
        out, _ = bo.apply_feedback(events, eps, 2, cfg)
        assert out.values[0] == pytest.approx(0.2 * (1 + cfg.rho1 * 2) ** 3)

    def test_replica_floors(self):
        events = [FeedbackEvent(0, 1, MEMORY_OVERFLOW, 3), FeedbackEvent(1, 0, MISPREDICT, 1)]
        _, floors = bo.apply_feedback(events, bo.EpsilonVector.initial(0.2, 2, 0.5), 1,
                                      TunerConfig(), [[1, 2], [1, 1]], max_replicas=4)
        assert floors == {(0, 1): 4}


class TestBound:
    def test_closed_form(self):
        assert bo.convergence_bound(0.5, 0.25, 0.2, 0.1) == pytest.approx(3.0)
        assert bo.convergence_bound(0.5, 0.25, [0.1, 0.2], 0.2) == 0.0

    @pytest.mark.parametrize("args", [(0.25, 0.25, 0.2, 0.1), (0.5, 0.25, 0.2, 0.0),
                                      (0.5, 0.25, 0.2, 0.3)])
    def test_preconditions(self, args):
        with pytest.raises(ValueError):
            bo.convergence_bound(*args)

    def test_envelope_limit_stays_above_small_delta(self):
        # the worst-case envelope tends to eps0 * rho1 / rho, not to zero
        assert bo.worst_case_epsilon(0.2, 0.5, 0.25, 10 ** 6) == pytest.approx(0.1, rel=1e-5)
        assert bo.first_crossing(0.2, 0.5, 0.25, 0.01) is None

    @settings(max_examples=50, deadline=None)
    @given(tau=st.integers(1, 200), eps0=st.floats(0.01, 1.0))
    def test_recurrence_under_worst_feedback_meets_envelope(self, tau, eps0):
        cfg = TunerConfig()
        eps = bo.EpsilonVector.initial(eps0, 8, 0.5).decayed(cfg.rho, tau)
        out, _ = bo.apply_feedback([FeedbackEvent(0, 0, MEMORY_OVERFLOW, 1)], eps, tau, cfg)
        assert out.max() <= bo.worst_case_epsilon(eps0, cfg.rho, cfg.rho1, tau) * (1 + 1e-12)

    @settings(max_examples=50, deadline=None)
    @given(frac=st.floats(0.85, 1.0), eps0=st.floats(0.01, 1.0))
    def test_bound_holds_where_envelope_crosses(self, frac, eps0):
        delta = frac * eps0
        tstar = bo.convergence_bound(0.5, 0.25, eps0, delta)
        for tau in range(math.floor(tstar) + 1, 200):
            assert bo.worst_case_epsilon(eps0, 0.5, 0.25, tau) < delta


class TestPropose:
    @pytest.fixture
    def space(self, world):
        return bo.KeySpace(world[2].feature_table(), 1000, 128)

    def best(self, space, Q):
        return bo.initial_pairs(space, Q, np.random.default_rng(0))

    def test_zero_epsilon_keeps_best(self, space):
        best = self.best(space, 50)
        eps = bo.EpsilonVector(np.zeros(50), np.zeros(50), 0.5)
        assert bo.propose(best, space, None, eps, np.random.default_rng(1)) == best

    def test_unit_epsilon_replaces_everything(self, space):
        best = [((999, 0, 999, 0, 0), 10 ** 6)] * 50
        eps = bo.EpsilonVector(np.ones(50), np.ones(50), 0.5)
        out = bo.propose(best, space, None, eps, np.random.default_rng(1))
        assert all(p != best[0] for p in out)

    def test_exploration_fraction(self, space):
        Q = 10 ** 4
        best = [((999, 0, 999, 0, 0), 10 ** 6)] * Q
        eps = bo.EpsilonVector(np.full(Q, 0.5), np.full(Q, 0.5), 0.5)
        out = bo.propose(best, space, None, eps, np.random.default_rng(7))
        frac = sum(p != best[0] for p in out) / Q
        assert abs(frac - 0.5) <= 0.05
        again = bo.propose(best, space, None, eps, np.random.default_rng(7))
        assert out == again

    def test_slow_block_uses_limited_tokens(self, space):
        Q = 200
        best = self.best(space, Q)
        eps = bo.EpsilonVector(np.ones(Q), np.ones(Q), 0.5)
        out = bo.propose(best, space, np.array([5, 6]), eps, np.random.default_rng(2))
        assert all(key[0] in (5, 6) and key[2] in (5, 6) for key, _ in out[:100])

    def test_values_within_bounds(self, space):
        Q = 300
        eps = bo.EpsilonVector(np.ones(Q), np.ones(Q), 0.5)
        out = bo.propose(self.best(space, Q), space, None, eps, np.random.default_rng(3))
        assert all(1 <= v <= space.value_bound(key) for key, v in out)

    def test_length_checked(self, space):
        eps = bo.EpsilonVector(np.ones(3), np.ones(3), 0.5)
        with pytest.raises(ValueError):
            bo.propose(self.best(space, 2), space, None, eps, np.random.default_rng(0))


def test_stop_rule():
    assert not bo.stop_rule([5.0] * 5, 5, 0.01)
    assert bo.stop_rule([5.0] * 6, 5, 0.01)
    assert not bo.stop_rule([9.0, 5, 5, 5, 5, 5], 5, 0.01)
    assert bo.stop_rule([9.0, 5, 5, 5, 5, 5], 5, math.inf)


def test_config_preconditions():
    with pytest.raises(ConfigError):
        TunerConfig(rho=0.2, rho1=0.25)
    with pytest.raises(ConfigError):
        TunerConfig(mu=1.0)


class TestRun:
    def test_infinite_zeta_stops_after_lam_plus_one(self, world):
        res = tune(world, small_cfg(zeta=math.inf, lam=3))
        assert res.stopped and res.iterations == 4

    def test_zero_epsilon_gives_constant_trace(self, world):
        res = tune(world, small_cfg(epsilon0=0.0, lam=3))
        costs = [t.cost for t in res.history]
        assert len(set(costs)) == 1

    def test_best_so_far_non_increasing_and_replay_exact(self, world):
        profile, model, w = world
        cfg = small_cfg(epsilon0=0.6, lam=4, zeta=0.0)
        res = tune(world, cfg, seed=1)
        trace = res.best_so_far()
        assert all(b <= a for a, b in zip(trace, trace[1:]))
        assert res.best.cost == min(t.cost for t in res.history)
        assert res.best.cost <= res.history[0].cost
        again = bo.evaluate_trial(w.feature_table(), res.best.pairs, res.best.min_replicas,
                                  w.batches[:cfg.batches], profile, model, PlannerConfig(), cfg,
                                  1, w.config.seq_len)
        assert again.cost == res.best.cost

    def test_same_seed_same_history(self, world):
        a = tune(world, small_cfg(lam=2), seed=5)
        b = tune(world, small_cfg(lam=2), seed=5)
        assert [t.cost for t in a.history] == [t.cost for t in b.history]
        assert [t.pairs for t in a.history] == [t.pairs for t in b.history]

    def test_needs_enough_batches(self, world):
        with pytest.raises(ValueError):
            tune(world, small_cfg(batches=3))

    def test_trace_csv(self, world, tmp_path):
        res = tune(world, small_cfg(zeta=math.inf, lam=1))
        bo.write_trace_csv(tmp_path / "t.csv", res, "hdr")
        bo.write_pairs_csv(tmp_path / "p.csv", res.best.pairs)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[1].startswith("iteration,cost,min_cost") and len(lines) == 2 + res.iterations
        assert len((tmp_path / "p.csv").read_text().splitlines()) == 1 + 40
