"""Regret matching (Hart & Mas-Colell, 2000) as a per-state local learner.

The policy is proportional to the positive part of the cumulative regret,
falling back to uniform when no action has positive regret. Against any
sequence of q-rows bounded by ``U`` the largest cumulative regret after ``T``
observations stays below ``2 U sqrt(|A| T)``.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def regret_matching_policy(cumulative_regret) -> np.ndarray:
    """Action distributions from cumulative regrets along the last axis."""
    regret = np.asarray(cumulative_regret, dtype=float)
    positive = np.maximum(regret, 0.0)
    total = positive.sum(axis=-1, keepdims=True)
    n_actions = regret.shape[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(total > 0, positive / np.where(total > 0, total, 1.0), 1.0 / n_actions)
    return probs


def instantaneous_regret(q_rows, policy_rows) -> np.ndarray:
    """``q(a) - <pi, q>`` along the last axis."""
    q_rows = np.asarray(q_rows, dtype=float)
    policy_rows = np.asarray(policy_rows, dtype=float)
    if q_rows.shape != policy_rows.shape:
        raise ShapeError(f"q-row shape {q_rows.shape} does not match policy shape {policy_rows.shape}")
    return q_rows - np.sum(q_rows * policy_rows, axis=-1, keepdims=True)


class RegretMatcher:
    """Regret-matching learner for a single decision point."""

    def __init__(self, n_actions: int):
        if n_actions < 1:
            raise ValueError("n_actions must be positive")
        self.cumulative_regret = np.zeros(n_actions)
        self.iterations_seen = 0

    @property
    def n_actions(self) -> int:
        return self.cumulative_regret.size

    def current_policy(self) -> np.ndarray:
        return regret_matching_policy(self.cumulative_regret)

    def observe(self, q_row, policy_row) -> "RegretMatcher":
        """Accumulate the regret of ``policy_row`` (the emitted policy) against ``q_row``."""
        q_row = np.asarray(q_row, dtype=float)
        if q_row.shape != (self.n_actions,):
            raise ShapeError(f"q-row must have {self.n_actions} entries, got shape {q_row.shape}")
        self.cumulative_regret = self.cumulative_regret + instantaneous_regret(q_row, policy_row)
        self.iterations_seen += 1
        return self

    def max_regret(self) -> float:
        return float(np.max(self.cumulative_regret))


def regret_bound(reward_bound: float, n_actions: int, iterations: int) -> float:
    """``2 U sqrt(|A| T)``."""
    return 2.0 * reward_bound * np.sqrt(n_actions * iterations)
