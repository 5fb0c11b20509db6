import numpy as np
import pytest

from cautious.belief_ensemble import RewardEnsemble, synthetic_belief
from cautious.errors import BeliefExhaustedError, ConfigError
from cautious.kofn_cfr import (
    KofnConfig,
    best_deterministic_policy,
    kofn_value,
    kofn_value_from_returns,
    rank_and_mix,
    read_run_log,
    regret_curve,
    run,
    write_run_log,
)
from cautious.mdp_core import RewardTable, StationaryPolicy, TabularMdp, expected_reward, uniform_policy
from cautious.policy_eval import discounted_state_distribution, evaluate_policy, optimal_policy
from cautious.regret_matching import regret_bound
from helpers import brute_force_optimum, random_mdp, random_reward, solve_values


def repeated(table, count):
    return RewardEnsemble([table] * count)


class TestConfig:
    @pytest.mark.parametrize("k, n, iterations", [(0, 3, 10), (4, 3, 10), (1, 1, 0)])
    def test_invalid(self, k, n, iterations):
        with pytest.raises(ConfigError):
            KofnConfig(k, n, iterations)

    def test_bad_output_mode(self):
        with pytest.raises(ConfigError):
            KofnConfig(1, 2, output_mode="median")

    def test_snapshot_stride_default(self):
        assert KofnConfig(1, 1, 100).stride == 1
        assert KofnConfig(1, 1, 2000).stride == 10


class TestRankAndMix:
    def tables(self):
        return [RewardTable(np.full((1, 1, 1), v)) for v in (10.0, 20.0, 30.0)]

    def test_sort_trace(self):
        mixed, selected = rank_and_mix(self.tables(), [3.0, 1.0, 2.0], 2)
        np.testing.assert_array_equal(selected, [1, 2])
        assert mixed.values[0, 0, 0] == 25.0

    def test_full_average(self):
        mixed, _ = rank_and_mix(self.tables(), [3.0, 1.0, 2.0], 3)
        assert mixed.values[0, 0, 0] == pytest.approx(20.0)

    def test_singleton_is_unchanged(self):
        tables = self.tables()
        mixed, selected = rank_and_mix(tables, [3.0, 1.0, 2.0], 1)
        np.testing.assert_array_equal(mixed.values, tables[1].values)

    def test_ties_break_by_position(self):
        _, selected = rank_and_mix(self.tables(), [1.0, 1.0, 1.0], 2)
        np.testing.assert_array_equal(selected, [0, 1])

    def test_k_larger_than_n(self):
        with pytest.raises(ValueError):
            rank_and_mix(self.tables(), [1.0, 2.0, 3.0], 4)


class TestRun:
    @pytest.mark.parametrize("seed", range(4))
    def test_single_reward_converges_to_optimal(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng, 4, 3, 0.9)
        reward = random_reward(rng, 4, 3)
        T = 2000
        _, record = run(mdp, repeated(reward, T), KofnConfig(1, 1, T))
        best, _ = brute_force_optimum(mdp, reward)
        _, opt_value = optimal_policy(mdp, reward, 1e-10)
        best_iterate = record.mixed_returns().max()
        assert best_iterate == pytest.approx(best, abs=1e-3)
        assert opt_value.values @ mdp.initial_dist == pytest.approx(best, abs=1e-8)

    def test_k_equals_n_matches_mean_table(self, rng):
        mdp = random_mdp(rng, 3, 3, 0.8)
        a, b = random_reward(rng, 3, 3), random_reward(rng, 3, 3)
        mean = RewardTable((a.values + b.values) / 2)
        T = 40
        _, two = run(mdp, RewardEnsemble([a, b] * T), KofnConfig(2, 2, T))
        _, one = run(mdp, repeated(mean, T), KofnConfig(1, 1, T))
        for t in range(1, T + 1):
            np.testing.assert_allclose(two.snapshots[t], one.snapshots[t], atol=1e-12)

    @pytest.mark.parametrize("method", ["direct", "iterative"])
    def test_mixed_return_is_mean_of_selected(self, rng, method):
        mdp = random_mdp(rng, 4, 3, 0.95)
        base = random_reward(rng, 4, 3)
        belief = synthetic_belief(base, np.full((4, 3), 0.5), 200, seed=3)
        _, record = run(mdp, belief, KofnConfig(3, 10, 20, eval_method=method))
        for it in record.iterations:
            assert it.mixed_return == pytest.approx(it.returns[it.selected].mean(), abs=1e-10)
            # selected positions are exactly the k lowest, ties by position
            np.testing.assert_array_equal(it.selected, np.argsort(it.returns, kind="stable")[:3])

    def test_first_policy_is_uniform_and_last_mode_outputs_final_iterate(self, rng):
        mdp = random_mdp(rng, 3, 2, 0.5)
        policy, record = run(mdp, repeated(random_reward(rng, 3, 2), 30), KofnConfig(1, 1, 30))
        np.testing.assert_allclose(record.snapshots[1], 0.5)
        assert record.output_iteration == 30
        np.testing.assert_array_equal(policy.probs, record.snapshots[30])

    def test_record_returns_match_direct_oracle(self, rng):
        mdp = random_mdp(rng, 3, 2, 0.9)
        belief = synthetic_belief(random_reward(rng, 3, 2), np.full((3, 2), 0.3), 12, seed=0)
        _, record = run(mdp, belief, KofnConfig(1, 4, 3))
        it = record.iterations[1]
        policy = record.policy_at(2)
        oracle = [solve_values(mdp, policy, belief.member(int(i))) @ mdp.initial_dist for i in it.sampled]
        np.testing.assert_allclose(it.returns, oracle, atol=1e-12)

    def test_exhaustion_propagates(self, rng):
        mdp = random_mdp(rng, 2, 2)
        with pytest.raises(BeliefExhaustedError):
            run(mdp, repeated(random_reward(rng, 2, 2), 5), KofnConfig(1, 2, 3))

    def test_same_seed_same_output(self, rng):
        mdp = random_mdp(rng, 3, 2, 0.9)
        belief = synthetic_belief(random_reward(rng, 3, 2), np.ones((3, 2)), 10, seed=0).with_replacement(seed=5)
        for mode in ("sampled", "best"):
            cfg = KofnConfig(2, 5, 15, output_mode=mode, seed=9)
            p1, r1 = run(mdp, belief.shuffle(1), cfg)
            p2, r2 = run(mdp, belief.shuffle(1), cfg)
            np.testing.assert_array_equal(p1.probs, p2.probs)
            assert r1.output_iteration == r2.output_iteration

    def test_best_mode_maximizes_estimated_value(self, rng):
        mdp = random_mdp(rng, 3, 2, 0.9)
        belief = synthetic_belief(random_reward(rng, 3, 2), np.ones((3, 2)), 10, seed=0).with_replacement(seed=1)
        cfg = KofnConfig(1, 4, 10, output_mode="best", seed=2)
        _, record = run(mdp, belief, cfg)
        scores = {t: kofn_value(mdp, record.policy_at(t), belief, 1, 4, 100, [2, 2])[0] for t in record.snapshots}
        assert scores[record.output_iteration] == max(scores.values())

    def test_experiment_configurations_run(self, rng):
        mdp = random_mdp(rng, 3, 3, 0.9)
        belief = synthetic_belief(random_reward(rng, 3, 3), np.full((3, 3), 0.5), 2000, seed=0)
        for k, n in [(1, 20), (5, 20), (10, 20), (1, 10), (5, 10), (10, 10)]:
            queue = belief.shuffle(k)
            run(mdp, queue, KofnConfig(k, n, 100))
            assert queue.remaining == 2000 - 100 * n


class TestKofnValue:
    def test_k_equals_n_is_belief_mean(self, rng):
        mdp = random_mdp(rng, 3, 2, 0.5)
        belief = synthetic_belief(random_reward(rng, 3, 2), np.ones((3, 2)), 8, seed=0)
        policy = uniform_policy(mdp)
        returns = [solve_values(mdp, policy, belief.member(i)) @ mdp.initial_dist for i in range(8)]
        # with replacement, the N-of-N value is an unbiased estimate of the mean return
        mean, stderr = kofn_value(mdp, policy, belief, 4, 4, 20000, seed=0)
        assert mean == pytest.approx(np.mean(returns), abs=4 * stderr)

    def test_two_member_enumeration(self):
        rng = np.random.default_rng(0)
        mean, stderr = kofn_value_from_returns([0.0, 1.0], 1, 2, 40000, rng)
        # the four ordered pairs are equally likely; only (1, 1) has minimum 1
        assert mean == pytest.approx(0.25, abs=4 * stderr)

    def test_deterministic_belief(self, rng):
        mdp = random_mdp(rng, 3, 2, 0.7)
        reward = random_reward(rng, 3, 2)
        policy = uniform_policy(mdp)
        mean, stderr = kofn_value(mdp, policy, repeated(reward, 6), 2, 5, 50, seed=1)
        assert mean == pytest.approx(solve_values(mdp, policy, reward) @ mdp.initial_dist, abs=1e-12)
        assert stderr == pytest.approx(0.0, abs=1e-15)


class TestRegretCurve:
    def test_single_reward_meets_theorem_bound(self, rng):
        mdp = random_mdp(rng, 3, 2, 0.8)
        reward = random_reward(rng, 3, 2)
        T = 400
        _, record = run(mdp, repeated(reward, T), KofnConfig(1, 1, T, snapshot_stride=1))
        opt, _ = optimal_policy(mdp, reward, 1e-10)
        curve = regret_curve(record, mdp, opt)
        t = np.arange(1, T + 1)
        bound = regret_bound(reward.bound, mdp.n_actions, t) / (1 - mdp.discount)
        assert np.all(curve <= bound)
        assert curve[-1] / T < curve[9] / 10

    def test_self_competitor_is_dominated_by_best(self, rng):
        mdp = random_mdp(rng, 3, 2, 0.8)
        belief = synthetic_belief(random_reward(rng, 3, 2), np.ones((3, 2)), 200, seed=0)
        _, record = run(mdp, belief, KofnConfig(2, 4, 50))
        average = StationaryPolicy(np.mean([record.snapshots[t] for t in range(1, 51)], axis=0))
        assert regret_curve(record, mdp, average)[-1] <= regret_curve(record, mdp)[-1] + 1e-12

    def test_one_step_regret_is_scaled_advantage(self, rng):
        mdp = random_mdp(rng, 4, 3, 0.9)
        reward = random_reward(rng, 4, 3)
        _, record = run(mdp, repeated(reward, 1), KofnConfig(1, 1, 1))
        competitor = StationaryPolicy.deterministic([0, 2, 1, 0], 3)
        regret = regret_curve(record, mdp, competitor)[0]
        first = record.policy_at(1)
        value = evaluate_policy(mdp, first, reward, method="direct")
        q = (1 - mdp.discount) * expected_reward(mdp, reward) + mdp.discount * mdp.transition @ value.values
        rho = q - np.sum(first.probs * q, axis=1, keepdims=True)
        d = discounted_state_distribution(mdp, competitor, mdp.initial_dist, method="direct")
        lemma = d @ np.sum(competitor.probs * rho, axis=1) / (1 - mdp.discount)
        assert regret == pytest.approx(lemma, abs=1e-10)

    def test_requires_snapshots(self, rng):
        mdp = random_mdp(rng, 2, 2)
        _, record = run(mdp, repeated(random_reward(rng, 2, 2), 5), KofnConfig(1, 1, 5, snapshot_stride=2))
        with pytest.raises(ValueError, match="missing snapshots"):
            regret_curve(record, mdp)


def test_best_deterministic_matches_brute_force(rng):
    mdp = random_mdp(rng, 4, 3, 0.9)
    reward = random_reward(rng, 4, 3)
    policy = best_deterministic_policy(mdp, expected_reward(mdp, reward))
    best, actions = brute_force_optimum(mdp, reward)
    assert solve_values(mdp, policy, reward) @ mdp.initial_dist == pytest.approx(best, abs=1e-12)


def test_run_log_round_trip(rng, tmp_path):
    mdp = random_mdp(rng, 3, 2, 0.9)
    belief = synthetic_belief(random_reward(rng, 3, 2), np.ones((3, 2)), 30, seed=0)
    _, record = run(mdp, belief, KofnConfig(2, 3, 10))
    write_run_log(record, tmp_path / "run.log", comment="seed=0")
    back = read_run_log(tmp_path / "run.log")
    assert len(back) == 10
    for a, b in zip(record.iterations, back):
        np.testing.assert_array_equal(a.sampled, b.sampled)
        np.testing.assert_array_equal(a.selected, b.selected)
        np.testing.assert_array_equal(a.returns, b.returns)
        assert a.mixed_return == b.mixed_return
