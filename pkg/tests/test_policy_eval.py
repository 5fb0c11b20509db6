import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cautious.errors import ConvergenceError
from cautious.mdp_core import RewardTable, StationaryPolicy, TabularMdp, uniform_policy
from cautious.policy_eval import (
    QFunction,
    advantages,
    discounted_state_distribution,
    evaluate_policy,
    expected_return,
    optimal_policy,
    q_values,
)
from helpers import brute_force_optimum, random_mdp, random_policy, random_reward, solve_values


def chain_mdp():
    """s0 -> s1 (reward 1), s1 -> s1 (reward 0), one action, gamma 0.5."""
    p = np.array([[[0.0, 1.0]], [[0.0, 1.0]]])
    reward = RewardTable(np.array([[[0.0, 1.0]], [[0.0, 0.0]]]))
    return TabularMdp(p, [1.0, 0.0], 0.5), reward


class TestEvaluatePolicy:
    @pytest.mark.parametrize("discount", [0.0, 0.5, 0.9, 0.99])
    def test_constant_reward_gives_constant_value(self, rng, discount):
        mdp = random_mdp(rng, 5, 3, discount)
        reward = RewardTable(np.full((5, 3, 5), -0.7))
        value = evaluate_policy(mdp, random_policy(rng, 5, 3), reward, tol=1e-10)
        np.testing.assert_allclose(value.values, -0.7, atol=1e-9)

    def test_zero_discount_is_immediate_reward(self, rng):
        mdp = random_mdp(rng, 4, 3, 0.0)
        reward = random_reward(rng, 4, 3)
        policy = random_policy(rng, 4, 3)
        immediate = np.einsum("sa,sat,sat->s", policy.probs, mdp.transition, reward.values)
        np.testing.assert_allclose(evaluate_policy(mdp, policy, reward).values, immediate, atol=1e-15)

    @pytest.mark.parametrize("method", ["iterative", "direct"])
    def test_two_state_chain(self, method):
        mdp, reward = chain_mdp()
        value = evaluate_policy(mdp, uniform_policy(mdp), reward, tol=1e-12, method=method)
        np.testing.assert_allclose(value.values, [0.5, 0.0], atol=1e-11)

    @pytest.mark.parametrize("discount", [0.3, 0.9, 0.99])
    def test_matches_linear_solve_oracle(self, rng, discount):
        mdp = random_mdp(rng, 6, 4, discount)
        reward, policy = random_reward(rng, 6, 4), random_policy(rng, 6, 4)
        tol = 1e-9
        value = evaluate_policy(mdp, policy, reward, tol=tol)
        assert value.residual <= tol
        # a sweep change below tol bounds the error by tol * gamma / (1 - gamma)
        np.testing.assert_allclose(value.values, solve_values(mdp, policy, reward), atol=tol / (1 - discount))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.5, 0.9, 0.99]))
    def test_values_stay_within_reward_bound(self, seed, discount):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng, 4, 3, discount)
        reward = random_reward(rng, 4, 3, scale=2.0)
        value = evaluate_policy(mdp, random_policy(rng, 4, 3), reward, method="direct")
        assert np.all(np.abs(value.values) <= reward.bound + 1e-12)

    def test_sweep_cap_raises_with_residual(self, rng):
        mdp = random_mdp(rng, 3, 2, 0.99)
        with pytest.raises(ConvergenceError) as info:
            evaluate_policy(mdp, uniform_policy(mdp), random_reward(rng, 3, 2), tol=1e-12, max_sweeps=5)
        assert info.value.residual > 1e-12

    def test_bad_method(self, rng):
        mdp = random_mdp(rng, 2, 2)
        with pytest.raises(ValueError):
            evaluate_policy(mdp, uniform_policy(mdp), random_reward(rng, 2, 2), method="magic")


class TestQAndAdvantage:
    def test_zero_discount_q_is_expected_reward(self, rng):
        mdp = random_mdp(rng, 3, 4, 0.0)
        reward, policy = random_reward(rng, 3, 4), random_policy(rng, 3, 4)
        q = q_values(mdp, policy, reward, evaluate_policy(mdp, policy, reward))
        np.testing.assert_allclose(q.values, np.einsum("sat,sat->sa", mdp.transition, reward.values))

    def test_single_action_q_equals_v(self):
        mdp, reward = chain_mdp()
        policy = uniform_policy(mdp)
        value = evaluate_policy(mdp, policy, reward, tol=1e-12)
        q = q_values(mdp, policy, reward, value)
        np.testing.assert_allclose(q.values[:, 0], value.values, atol=1e-12)
        assert q.values[0, 0] == pytest.approx(0.5, abs=1e-11)

    @pytest.mark.parametrize("discount", [0.0, 0.5, 0.9, 0.99])
    def test_policy_weighted_q_is_v_and_advantage_sums_to_zero(self, rng, discount):
        mdp = random_mdp(rng, 5, 3, discount)
        reward, policy = random_reward(rng, 5, 3), random_policy(rng, 5, 3)
        tol = 1e-8
        value = evaluate_policy(mdp, policy, reward, tol=tol)
        q = q_values(mdp, policy, reward, value)
        np.testing.assert_allclose(np.sum(policy.probs * q.values, axis=1), value.values, atol=10 * tol / (1 - discount))
        rho = advantages(q, policy)
        np.testing.assert_allclose(np.sum(policy.probs * rho.values, axis=1), 0.0, atol=1e-14)

    def test_hand_advantage(self):
        rho = advantages(QFunction(np.array([[1.0, 0.0]])), StationaryPolicy(np.array([[0.5, 0.5]])))
        np.testing.assert_allclose(rho.values, [[0.5, -0.5]])

    def test_greedy_action_has_zero_advantage(self, rng):
        q = QFunction(rng.normal(size=(4, 3)))
        policy = StationaryPolicy.deterministic(np.argmax(q.values, axis=1), 3)
        rho = advantages(q, policy)
        np.testing.assert_allclose(rho.values[np.arange(4), np.argmax(q.values, axis=1)], 0.0)


class TestExpectedReturn:
    def test_point_mass_and_mixture(self):
        from cautious.policy_eval import ValueFunction

        v = ValueFunction(np.array([0.5, 0.0]), 0.0)
        assert expected_return(v, [1.0, 0.0]) == 0.5
        assert expected_return(v, [0.5, 0.5]) == 0.25

    def test_constant_reward(self, rng):
        mdp = random_mdp(rng, 3, 2, 0.9)
        value = evaluate_policy(mdp, uniform_policy(mdp), RewardTable(np.full((3, 2, 3), 2.0)), tol=1e-12)
        assert expected_return(value, mdp.initial_dist) == pytest.approx(2.0, abs=1e-10)


class TestStateDistribution:
    def test_self_loop_is_point_mass(self):
        mdp = TabularMdp(np.ones((1, 2, 1)), [1.0], 0.9)
        np.testing.assert_allclose(discounted_state_distribution(mdp, uniform_policy(mdp), 0), [1.0])

    @pytest.mark.parametrize("method", ["iterative", "direct"])
    def test_absorbing_chain(self, method):
        mdp, _ = chain_mdp()
        d = discounted_state_distribution(mdp, uniform_policy(mdp), 0, tol=1e-12, method=method)
        np.testing.assert_allclose(d, [0.5, 0.5], atol=1e-11)

    def test_zero_discount_returns_start(self, rng):
        mdp = random_mdp(rng, 4, 2, 0.0)
        start = np.array([0.1, 0.2, 0.3, 0.4])
        np.testing.assert_allclose(discounted_state_distribution(mdp, uniform_policy(mdp), start), start)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_is_a_distribution(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng, 5, 3, 0.95)
        d = discounted_state_distribution(mdp, random_policy(rng, 5, 3), int(rng.integers(5)), method="direct")
        assert np.all(d >= -1e-15)
        assert d.sum() == pytest.approx(1.0, abs=1e-12)


class TestOptimalPolicy:
    def test_bandit_argmax(self):
        mdp = TabularMdp(np.ones((1, 3, 1)), [1.0], 0.0)
        policy, _ = optimal_policy(mdp, RewardTable(np.array([0.0, 1.0, 0.0]).reshape(1, 3, 1)))
        np.testing.assert_array_equal(policy.probs, [[0, 1, 0]])

    def test_ties_go_to_lowest_index(self):
        row = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 1.0])
        mdp = TabularMdp(np.ones((1, 6, 1)), [1.0], 0.0)
        policy, _ = optimal_policy(mdp, RewardTable(row.reshape(1, 6, 1)))
        assert policy.probs[0, 2] == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_exhaustive_search(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng, 5, 3, 0.9)
        reward = random_reward(rng, 5, 3)
        tol = 1e-8
        _, value = optimal_policy(mdp, reward, tol)
        best, _ = brute_force_optimum(mdp, reward)
        assert expected_return(value, mdp.initial_dist) == pytest.approx(best, abs=10 * tol)
