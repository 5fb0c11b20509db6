"""Exact evaluation of stationary policies in discounted tabular MDPs.

Returns are normalized by the effective horizon ``1 - gamma`` so values share
the scale of the rewards::

    v(s)    = sum_a pi(a|s) sum_s2 p(s2|s,a) [(1 - gamma) r(s,a,s2) + gamma v(s2)]
    q(s, a) = sum_s2 p(s2|s,a) [(1 - gamma) r(s,a,s2) + gamma v(s2)]

The default solver runs synchronous (Jacobi) Bellman sweeps until the largest
absolute change drops below ``tol``. ``method="direct"`` solves the linear
system instead; both agree to 1e-8 once the sweeps are run to a tight
tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ShapeError
from .mdp_core import (
    RewardTable,
    StationaryPolicy,
    TabularMdp,
    check_policy,
    expected_reward,
)

DEFAULT_TOL = 1e-6
MAX_SWEEPS = 10**6


@dataclass(frozen=True, eq=False)
class ValueFunction:
    values: np.ndarray
    residual: float


@dataclass(frozen=True, eq=False)
class QFunction:
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class AdvantageFunction:
    values: np.ndarray


def policy_transition(mdp: TabularMdp, policy: StationaryPolicy) -> np.ndarray:
    """State-to-state matrix ``P_pi[s, s2] = sum_a pi(a|s) p(s2|s,a)``."""
    check_policy(mdp, policy)
    return np.einsum("ij,ijk->ik", policy.probs, mdp.transition)


def evaluate_expected_rewards(
    mdp: TabularMdp,
    policy: StationaryPolicy,
    rewards: np.ndarray,
    tol: float = DEFAULT_TOL,
    method: str = "iterative",
    max_sweeps: int = MAX_SWEEPS,
):
    """Evaluate ``policy`` under a stack of expected-reward matrices.

    ``rewards`` has shape ``(n, S, A)`` (see :func:`expected_reward`). All
    columns share one sweep schedule, so the result is linear in the rewards
    to floating-point accuracy. Returns ``(values (n, S), residual)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    rewards = np.asarray(rewards, dtype=float)
    if rewards.ndim != 3 or rewards.shape[1:] != (mdp.n_states, mdp.n_actions):
        raise ShapeError(f"expected rewards of shape (n, {mdp.n_states}, {mdp.n_actions}), got {rewards.shape}")
    gamma = mdp.discount
    p_pi = policy_transition(mdp, policy)
    # (S, n): one column per reward
    r_pi = (1.0 - gamma) * np.einsum("sa,nsa->sn", policy.probs, rewards)

    if method == "direct":
        values = np.linalg.solve(np.eye(mdp.n_states) - gamma * p_pi, r_pi)
        residual = float(np.max(np.abs(r_pi + gamma * p_pi @ values - values), initial=0.0))
        return values.T, residual
    if method != "iterative":
        raise ValueError(f"unknown evaluation method {method!r}")

    values = np.zeros_like(r_pi)
    for _ in range(max_sweeps):
        new = r_pi + gamma * (p_pi @ values)
        residual = float(np.max(np.abs(new - values), initial=0.0))
        values = new
        if residual < tol:
            return values.T, residual
    raise ConvergenceError(f"policy evaluation did not converge in {max_sweeps} sweeps", residual)


def evaluate_policy(
    mdp: TabularMdp,
    policy: StationaryPolicy,
    reward: RewardTable,
    tol: float = DEFAULT_TOL,
    method: str = "iterative",
    max_sweeps: int = MAX_SWEEPS,
) -> ValueFunction:
    """Normalized discounted value of ``policy`` from every start state."""
    r = expected_reward(mdp, reward)[None]
    values, residual = evaluate_expected_rewards(mdp, policy, r, tol, method, max_sweeps)
    return ValueFunction(values[0], residual)


def q_from_expected(mdp: TabularMdp, rewards: np.ndarray, values: np.ndarray) -> np.ndarray:
    """q-values for expected rewards ``(S, A)`` and state values ``(S,)``."""
    gamma = mdp.discount
    return (1.0 - gamma) * rewards + gamma * (mdp.transition @ values)


def q_values(
    mdp: TabularMdp,
    policy: StationaryPolicy,
    reward: RewardTable,
    value_fn: ValueFunction,
) -> QFunction:
    check_policy(mdp, policy)
    if value_fn.values.shape != (mdp.n_states,):
        raise ShapeError("value function does not match the MDP")
    return QFunction(q_from_expected(mdp, expected_reward(mdp, reward), value_fn.values))


def advantages(q: QFunction, policy: StationaryPolicy) -> AdvantageFunction:
    """``rho(s, a) = q(s, a) - sum_b pi(b|s) q(s, b)``."""
    if q.values.shape != policy.probs.shape:
        raise ShapeError("q-values and policy shapes differ")
    baseline = np.sum(policy.probs * q.values, axis=1, keepdims=True)
    return AdvantageFunction(q.values - baseline)


def expected_return(value_fn: ValueFunction, initial_dist) -> float:
    initial_dist = np.asarray(initial_dist, dtype=float)
    if initial_dist.shape != value_fn.values.shape:
        raise ShapeError("initial distribution and value function shapes differ")
    return float(initial_dist @ value_fn.values)


def discounted_state_distribution(
    mdp: TabularMdp,
    policy: StationaryPolicy,
    start,
    tol: float = DEFAULT_TOL,
    method: str = "iterative",
    max_sweeps: int = MAX_SWEEPS,
) -> np.ndarray:
    """Normalized discounted visitation ``d = (1 - gamma) start + gamma P_pi^T d``.

    ``start`` is a state index or a distribution over states.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if np.ndim(start) == 0:
        start_dist = np.zeros(mdp.n_states)
        start_dist[int(start)] = 1.0
    else:
        start_dist = np.asarray(start, dtype=float)
        if start_dist.shape != (mdp.n_states,):
            raise ShapeError("start distribution does not match the MDP")
    gamma = mdp.discount
    p_pi_t = policy_transition(mdp, policy).T
    base = (1.0 - gamma) * start_dist

    if method == "direct":
        return np.linalg.solve(np.eye(mdp.n_states) - gamma * p_pi_t, base)

    dist = start_dist.copy()
    for _ in range(max_sweeps):
        new = base + gamma * (p_pi_t @ dist)
        residual = float(np.max(np.abs(new - dist)))
        dist = new
        if residual < tol:
            return dist
    raise ConvergenceError(f"state distribution did not converge in {max_sweeps} sweeps", residual)


def greedy_actions(q: np.ndarray) -> np.ndarray:
    """Lowest-index maximizing action in every row."""
    return np.argmax(q, axis=1)


def optimal_policy(
    mdp: TabularMdp,
    reward: RewardTable,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = MAX_SWEEPS,
):
    """Deterministic greedy policy after value iteration, with its exact value.

    Ties go to the lowest action index.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    r = expected_reward(mdp, reward)
    values = np.zeros(mdp.n_states)
    for _ in range(max_sweeps):
        new = np.max(q_from_expected(mdp, r, values), axis=1)
        residual = float(np.max(np.abs(new - values)))
        values = new
        if residual < tol:
            break
    else:
        raise ConvergenceError(f"value iteration did not converge in {max_sweeps} sweeps", residual)
    actions = greedy_actions(q_from_expected(mdp, r, values))
    policy = StationaryPolicy.deterministic(actions, mdp.n_actions)
    return policy, evaluate_policy(mdp, policy, reward, tol, method="direct")
