"""Random problem generators and independent oracles shared by the tests."""

import itertools

import numpy as np

from cautious.mdp_core import RewardTable, StationaryPolicy, TabularMdp


def random_mdp(rng, n_states=4, n_actions=3, discount=0.9, sparse=False):
    p = rng.random((n_states, n_actions, n_states))
    if sparse:
        p *= rng.random(p.shape) < 0.5
        p[..., 0] += 1e-3
    p /= p.sum(axis=2, keepdims=True)
    d0 = rng.random(n_states)
    return TabularMdp(p, d0 / d0.sum(), discount)


def random_reward(rng, n_states, n_actions, scale=1.0):
    return RewardTable(rng.uniform(-scale, scale, (n_states, n_actions, n_states)))


def random_policy(rng, n_states, n_actions):
    probs = rng.random((n_states, n_actions))
    return StationaryPolicy(probs / probs.sum(axis=1, keepdims=True))


def solve_values(mdp, policy, reward):
    """Oracle: normalized values from one dense linear solve."""
    p_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    r_pi = np.einsum("sa,sat,sat->s", policy.probs, mdp.transition, reward.values)
    g = mdp.discount
    return np.linalg.solve(np.eye(mdp.n_states) - g * p_pi, (1 - g) * r_pi)


def brute_force_optimum(mdp, reward):
    """Oracle: best expected return over every deterministic policy."""
    best, best_actions = -np.inf, None
    for actions in itertools.product(range(mdp.n_actions), repeat=mdp.n_states):
        policy = StationaryPolicy.deterministic(np.array(actions), mdp.n_actions)
        value = solve_values(mdp, policy, reward) @ mdp.initial_dist
        if value > best + 1e-12:
            best, best_actions = value, actions
    return best, best_actions


def _state_lookup(config, index):
    """Dense array mapping (column, speed, left row, left col, right row, right col) to a state index.

    An empty half is encoded as row ``vision_rows``, column 0.
    """
    V = config.vision_rows
    lookup = np.full((4, config.speed_limit + 1, V + 1, 4, V + 1, 4), -1)
    for i, s in enumerate(index.states):
        left = s.left_obstacle or (V, 0)
        right = s.right_obstacle or (V, 0)
        lookup[s.car_column, s.speed, left[0], left[1], right[0], right[1]] = i
    return lookup


def monte_carlo_safety(config, index, policy, rollouts, horizon, seed):
    """Oracle: normalized discounted safety statistics from vectorized rollouts.

    The dynamics are re-implemented here from the documented rules rather
    than read from the tabular model. Returns ``(means, standard errors)``
    for (speed, collision, collision speed).
    """
    rng = np.random.default_rng(seed)
    V, vmax, p = config.vision_rows, config.speed_limit, config.spawn_prob
    lookup = _state_lookup(config, index)
    allowed = [np.array([c for c in half if c in config.obstacle_columns]) for half in ((0, 1), (2, 3))]
    cdf = np.cumsum(policy.probs, axis=1)
    n = rollouts
    col = rng.choice([1, 2], size=n)
    spd = np.ones(n, dtype=int)
    rows = [np.full(n, V), np.full(n, V)]  # V means empty
    cols = [np.zeros(n, dtype=int), np.zeros(n, dtype=int)]
    totals = np.zeros((3, n))
    weight = 1.0 - config.discount
    for _ in range(horizon):
        s = lookup[col, spd, rows[0], cols[0], rows[1], cols[1]]
        assert np.all(s >= 0), "rollout reached a configuration outside the state space"
        a = (rng.random(n)[:, None] > cdf[s]).sum(axis=1)
        a = np.minimum(a, cdf.shape[1] - 1)
        lane = (a == 0) | (a == 1)
        new_col = np.clip(col + np.where(a == 0, -1, np.where(a == 1, 1, 0)), 0, 3)
        moving = spd > 0
        col = np.where(lane & moving, new_col, col)
        forward = np.where(lane, np.maximum(spd - 1, 0), spd)
        collided = np.zeros(n, dtype=bool)
        for h in range(2):
            present = rows[h] < V
            swept = present & (rows[h] < forward)
            collided |= swept & (cols[h] == col)
            rows[h] = np.where(swept, V, np.where(present, rows[h] - forward, V))
            cols[h] = np.where(rows[h] == V, 0, cols[h])
        totals[0] += weight * spd
        totals[1] += weight * collided
        totals[2] += weight * spd * collided
        spd = np.where(a == 2, np.minimum(spd + 1, vmax), np.where(a == 3, np.maximum(spd - 1, 0), spd))
        revealed = np.minimum(forward, V)
        for h in range(2):
            if allowed[h].size == 0:
                continue
            empty = rows[h] == V
            for offset in range(V):
                row = V - revealed + offset
                eligible = empty & (offset < revealed)
                hit = eligible & (rng.random(n) < p)
                pick = allowed[h][rng.integers(allowed[h].size, size=n)]
                rows[h] = np.where(hit, row, rows[h])
                cols[h] = np.where(hit, pick, cols[h])
                empty &= ~hit
        weight *= config.discount
    return totals.mean(axis=1), totals.std(axis=1, ddof=1) / np.sqrt(n)
