"""k-of-N counterfactual regret minimization with reward uncertainty.

Each iteration evaluates the current policy exactly under ``N`` reward tables
drawn from the belief, averages the ``k`` tables on which it does worst and
feeds the q-values under that mixed table to a regret matcher at every state.
Because only the rewards are uncertain, expected returns serve directly as
counterfactual values.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .belief_ensemble import RewardEnsemble
from .errors import ConfigError, ConvergenceError, ShapeError
from .mdp_core import (
    RewardTable,
    StationaryPolicy,
    TabularMdp,
    _write_atomic,
    expected_reward,
    uniform_policy,
)
from .policy_eval import (
    DEFAULT_TOL,
    MAX_SWEEPS,
    optimal_policy,
    policy_transition,
    q_from_expected,
)
from .regret_matching import instantaneous_regret, regret_matching_policy

OUTPUT_MODES = ("last", "best", "sampled")
EVAL_METHODS = ("direct", "iterative")


@dataclass(frozen=True)
class KofnConfig:
    k: int
    n: int
    iterations: int = 100
    eval_tolerance: float = DEFAULT_TOL
    output_mode: str = "last"
    seed: int = 0
    eval_method: str = "direct"
    snapshot_stride: int = None
    selection_repetitions: int = 100

    def __post_init__(self):
        if not 1 <= self.k <= self.n:
            raise ConfigError(f"need 1 <= k <= N, got k={self.k}, N={self.n}")
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if self.eval_tolerance <= 0:
            raise ConfigError("eval_tolerance must be positive")
        if self.output_mode not in OUTPUT_MODES:
            raise ConfigError(f"output_mode must be one of {OUTPUT_MODES}")
        if self.eval_method not in EVAL_METHODS:
            raise ConfigError(f"eval_method must be one of {EVAL_METHODS}")
        if self.snapshot_stride is not None and self.snapshot_stride < 1:
            raise ConfigError("snapshot_stride must be positive")
        if self.selection_repetitions < 1:
            raise ConfigError("selection_repetitions must be positive")

    @property
    def stride(self) -> int:
        if self.snapshot_stride is not None:
            return self.snapshot_stride
        return 1 if self.iterations <= 200 else math.ceil(self.iterations / 200)


@dataclass
class IterationLog:
    iteration: int
    sampled: np.ndarray  # member indices, in draw order
    returns: np.ndarray  # v_0(pi^t; r_j) per sampled member
    selected: np.ndarray  # positions into ``sampled``, worst first
    mixed_return: float


@dataclass
class KofnRunRecord:
    config: KofnConfig
    iterations: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)  # iteration -> policy probs
    mixed_rewards: dict = field(default_factory=dict)  # iteration -> expected mixed reward (S, A)
    output_policy: StationaryPolicy = None
    output_iteration: int = None

    def policy_at(self, iteration: int) -> StationaryPolicy:
        if iteration not in self.snapshots:
            raise KeyError(f"no policy snapshot for iteration {iteration}")
        return StationaryPolicy(self.snapshots[iteration])

    def mixed_returns(self) -> np.ndarray:
        return np.array([it.mixed_return for it in self.iterations])


class _Evaluator:
    """Policy evaluation with a shared transition matrix per policy."""

    def __init__(self, mdp: TabularMdp, method: str, tol: float):
        self.mdp = mdp
        self.method = method
        self.tol = tol
        self._eye = np.eye(mdp.n_states)

    def prepare(self, policy: StationaryPolicy):
        self.probs = policy.probs
        self.p_pi = policy_transition(self.mdp, policy)
        self.sweeps = None

    def values(self, rewards: np.ndarray, sweeps: int = None) -> np.ndarray:
        """State values ``(n, S)`` for expected rewards ``(n, S, A)``.

        With the iterative method, ``sweeps`` replays a fixed number of sweeps
        so a later evaluation is an exact linear function of an earlier one.
        """
        gamma = self.mdp.discount
        r_pi = (1.0 - gamma) * np.einsum("sa,nsa->sn", self.probs, rewards)
        if self.method == "direct":
            return np.linalg.solve(self._eye - gamma * self.p_pi, r_pi).T
        values = np.zeros_like(r_pi)
        limit = MAX_SWEEPS if sweeps is None else sweeps
        for count in range(1, limit + 1):
            new = r_pi + gamma * (self.p_pi @ values)
            residual = float(np.max(np.abs(new - values), initial=0.0))
            values = new
            if sweeps is None and residual < self.tol:
                self.sweeps = count
                return values.T
        if sweeps is None:
            raise ConvergenceError(f"policy evaluation did not converge in {limit} sweeps", residual)
        return values.T


def rank_and_mix(rewards, returns, k: int):
    """Mean of the ``k`` tables with the lowest returns.

    Ties are broken by sample position. Returns ``(mixed table, positions)``
    with positions ordered worst first.
    """
    returns = np.asarray(returns, dtype=float)
    if len(rewards) != returns.size:
        raise ShapeError(f"{len(rewards)} reward tables but {returns.size} returns")
    if not 1 <= k <= returns.size:
        raise ValueError(f"k must be in [1, {returns.size}], got {k}")
    selected = np.argsort(returns, kind="stable")[:k]
    total = np.array(rewards[selected[0]].values, dtype=float)
    for pos in selected[1:]:
        total += rewards[pos].values
    bound = max(rewards[pos].bound for pos in selected)
    mixed = total / k if k > 1 else total
    return RewardTable(np.clip(mixed, -bound, bound), bound), selected


def run(mdp: TabularMdp, belief: RewardEnsemble, config: KofnConfig):
    """Run k-of-N CFR; returns ``(output policy, run record)``.

    Draws ``N`` tables per iteration from ``belief`` (advancing its cursor).
    The first policy is uniform; ``last`` outputs the final policy that was
    evaluated and trained on.
    """
    if belief.shape != mdp.transition.shape:
        raise ShapeError(f"belief tables have shape {belief.shape}, MDP is {mdp.transition.shape}")
    evaluator = _Evaluator(mdp, config.eval_method, config.eval_tolerance)
    d0 = mdp.initial_dist
    regrets = np.zeros((mdp.n_states, mdp.n_actions))
    policy = uniform_policy(mdp)
    record = KofnRunRecord(config)
    stride = config.stride
    cache = {}

    for t in range(1, config.iterations + 1):
        if t > 1:
            policy = StationaryPolicy(regret_matching_policy(regrets))
        evaluator.prepare(policy)

        sampled = belief.draw_indices(config.n)
        tables = [belief.member(int(i)) for i in sampled]
        exp_rewards = np.empty((config.n, mdp.n_states, mdp.n_actions))
        for j, idx in enumerate(sampled):
            idx = int(idx)
            if idx not in cache:
                cache[idx] = expected_reward(mdp, tables[j])
            exp_rewards[j] = cache[idx]
        member_values = evaluator.values(exp_rewards)
        returns = member_values @ d0

        mixed, selected = rank_and_mix(tables, returns, config.k)
        mixed_exp = expected_reward(mdp, mixed)
        mixed_values = evaluator.values(mixed_exp[None], sweeps=evaluator.sweeps)[0]
        q = q_from_expected(mdp, mixed_exp, mixed_values)
        regrets += instantaneous_regret(q, policy.probs)

        record.iterations.append(
            IterationLog(t, sampled, returns, selected, float(mixed_values @ d0))
        )
        if t % stride == 0 or t == config.iterations or t == 1:
            record.snapshots[t] = policy.probs
            record.mixed_rewards[t] = mixed_exp

    _select_output(mdp, belief, config, record)
    return record.output_policy, record


def _select_output(mdp, belief, config, record):
    iterations = sorted(record.snapshots)
    if config.output_mode == "last":
        chosen = config.iterations
    elif config.output_mode == "sampled":
        rng = np.random.default_rng([config.seed, 1])
        chosen = iterations[int(rng.integers(len(iterations)))]
    else:
        scores = [
            kofn_value(
                mdp,
                record.policy_at(t),
                belief,
                config.k,
                config.n,
                config.selection_repetitions,
                seed=[config.seed, 2],
                tol=config.eval_tolerance,
                method=config.eval_method,
            )[0]
            for t in iterations
        ]
        chosen = iterations[int(np.argmax(scores))]
    record.output_iteration = chosen
    record.output_policy = record.policy_at(chosen)


def member_returns(mdp, policy, belief: RewardEnsemble, tol=DEFAULT_TOL, method="direct") -> np.ndarray:
    """``v_0(policy; r_m)`` for every member in construction order."""
    evaluator = _Evaluator(mdp, method, tol)
    evaluator.prepare(policy)
    rewards = np.stack([expected_reward(mdp, belief.member(i)) for i in range(len(belief))])
    return evaluator.values(rewards) @ mdp.initial_dist


def kofn_value_from_returns(returns, k, n, repetitions, rng):
    """Monte-Carlo k-of-N value from per-member returns (draws with replacement)."""
    returns = np.asarray(returns, dtype=float)
    draws = returns[rng.integers(0, returns.size, size=(repetitions, n))]
    worst = np.sort(draws, axis=1)[:, :k].mean(axis=1)
    stderr = float(worst.std(ddof=1) / np.sqrt(repetitions)) if repetitions > 1 else 0.0
    return float(worst.mean()), stderr


def kofn_value(mdp, policy, belief, k, n, repetitions, seed, tol=DEFAULT_TOL, method="direct"):
    """Estimate the k-of-N robust value of ``policy``: ``(mean, standard error)``.

    Each repetition draws ``N`` members with replacement and averages the
    ``k`` lowest returns.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={n}")
    returns = member_returns(mdp, policy, belief, tol, method)
    return kofn_value_from_returns(returns, k, n, repetitions, np.random.default_rng(seed))


def best_deterministic_policy(mdp: TabularMdp, rewards: np.ndarray, max_enumeration=4096):
    """Deterministic policy maximizing ``v_0`` under expected rewards ``(S, A)``.

    Enumerates all ``|A|^|S|`` policies when that count is at most
    ``max_enumeration``; otherwise falls back to value iteration.
    """
    S, A = mdp.n_states, mdp.n_actions
    gamma = mdp.discount
    if A**S > max_enumeration:
        policy, _ = optimal_policy(mdp, RewardTable(np.repeat(rewards[:, :, None], S, axis=2)), tol=1e-10)
        return policy
    choices = np.array(list(itertools.product(range(A), repeat=S)))
    rows = np.arange(S)
    p = mdp.transition[rows, choices]  # (n_pol, S, S)
    r = rewards[rows, choices]  # (n_pol, S)
    values = np.linalg.solve(np.eye(S) - gamma * p, (1.0 - gamma) * r[..., None])[..., 0]
    best = int(np.argmax(values @ mdp.initial_dist))
    return StationaryPolicy.deterministic(choices[best], A)


def regret_curve(record: KofnRunRecord, mdp: TabularMdp, competitor: StationaryPolicy = None):
    """Cumulative regret ``sum_{t<=tau} v_0(pi; rbar^t) - v_0(pi^t; rbar^t)`` per prefix.

    Without a competitor, the best deterministic policy in hindsight (for
    the summed mixed rewards) is used.
    """
    T = len(record.iterations)
    missing = [t for t in range(1, T + 1) if t not in record.mixed_rewards]
    if missing:
        raise ValueError(f"record is missing snapshots for {len(missing)} iterations (first: {missing[0]})")
    mixed = np.stack([record.mixed_rewards[t] for t in range(1, T + 1)])
    if competitor is None:
        competitor = best_deterministic_policy(mdp, mixed.mean(axis=0))
    evaluator = _Evaluator(mdp, "direct", DEFAULT_TOL)
    evaluator.prepare(competitor)
    competitor_returns = evaluator.values(mixed) @ mdp.initial_dist
    return np.cumsum(competitor_returns - record.mixed_returns())


# -- run log ------------------------------------------------------------------

LOG_COLUMNS = ("iteration", "sampled", "selected", "mixed_return", "returns")


def _ints(values):
    return ",".join(str(int(v)) for v in values)


def _floats(values):
    return ",".join(repr(float(v)) for v in values)


def run_log_lines(record: KofnRunRecord, comment: str = None):
    lines = [f"# {comment}"] if comment else []
    lines.append("\t".join(LOG_COLUMNS))
    for it in record.iterations:
        lines.append(
            "\t".join(
                [
                    str(it.iteration),
                    _ints(it.sampled),
                    _ints(it.selected),
                    repr(it.mixed_return),
                    _floats(it.returns),
                ]
            )
        )
    return lines


def write_run_log(record: KofnRunRecord, path, comment: str = None):
    _write_atomic(Path(path), run_log_lines(record, comment))


def read_run_log(path):
    """Parse a run log back into :class:`IterationLog` entries."""
    logs = []
    with open(path) as fh:
        rows = [line for line in fh.read().splitlines() if line and not line.startswith("#")]
    if not rows or tuple(rows[0].split("\t")) != LOG_COLUMNS:
        raise ValueError(f"{path}: missing run-log header")
    for row in rows[1:]:
        it, sampled, selected, mixed, returns = row.split("\t")
        logs.append(
            IterationLog(
                int(it),
                np.array([int(x) for x in sampled.split(",")]),
                np.array([float(x) for x in returns.split(",")]),
                np.array([int(x) for x in selected.split(",")]),
                float(mixed),
            )
        )
    return logs
