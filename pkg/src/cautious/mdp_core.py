"""Finite discounted MDPs, reward tables and stationary policies.

All three types hold read-only numpy arrays and are safe to share. They also
own the plain-text interchange format used by every other module::

    CAUTIOUS-MDP v1          CAUTIOUS-REW v1          CAUTIOUS-POL v1
    <n_states> <n_actions>   <n_states> <n_actions>   <n_states> <n_actions>
    <discount>               <bound>                  <row per state>
    <initial distribution>   <row per (s, a)>
    <row per (s, a)>

Values are written with Python's shortest round-trip float repr so a write/read
cycle is bit-exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError

PROB_TOL = 1e-12

MDP_HEADER = "CAUTIOUS-MDP v1"
REWARD_HEADER = "CAUTIOUS-REW v1"
POLICY_HEADER = "CAUTIOUS-POL v1"


def _frozen(array, dtype=float):
    array = np.asarray(array, dtype=dtype)
    if array.flags.writeable:
        array = array.copy()
        array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP ``(S, A, p, d0, gamma)``.

    ``transition[s, a, s2]`` is ``p(s2 | s, a)``. Construction does not check
    the probability invariants; use :func:`validate_mdp`.
    """

    transition: np.ndarray
    initial_dist: np.ndarray
    discount: float

    def __post_init__(self):
        transition = _frozen(self.transition)
        initial = _frozen(self.initial_dist)
        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise ShapeError(f"transition must be (S, A, S), got {transition.shape}")
        if initial.shape != (transition.shape[0],):
            raise ShapeError(
                f"initial_dist has shape {initial.shape}, expected ({transition.shape[0]},)"
            )
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "initial_dist", initial)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True, eq=False)
class RewardTable:
    """Reward values ``r(s, a, s2)`` bounded in magnitude by ``bound``.

    ``values`` may be a read-only broadcast view (for example a table that
    only depends on ``(s, s2)``), which keeps large ensembles cheap.
    """

    values: np.ndarray
    bound: float = None

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 3 or values.shape[0] != values.shape[2]:
            raise ShapeError(f"reward values must be (S, A, S), got {values.shape}")
        peak = float(np.max(np.abs(values))) if values.size else 0.0
        bound = peak if self.bound is None else float(self.bound)
        if not np.isfinite(peak):
            raise ValueError("reward values must be finite")
        if bound < 0 or peak > bound:
            raise ValueError(f"reward magnitude {peak!r} exceeds bound {bound!r}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "bound", bound)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class StationaryPolicy:
    """Per-state action distributions, ``probs[s, a] = pi(a | s)``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 2:
            raise ShapeError(f"policy must be (S, A), got {probs.shape}")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > PROB_TOL):
            raise ValueError("every policy row must be a probability distribution")
        object.__setattr__(self, "probs", probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def deterministic(cls, actions, n_actions):
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_if_invalid(self):
        if self.violations:
            raise ValueError("invalid MDP: " + "; ".join(self.violations))


def validate_mdp(mdp: TabularMdp) -> ValidationReport:
    """List every violated MDP invariant (empty report when valid)."""
    problems = []
    p = mdp.transition
    for s, a in zip(*np.nonzero(np.any(p < 0, axis=2))):
        problems.append(f"negative transition probability at (s={s}, a={a})")
    sums = p.sum(axis=2)
    for s, a in zip(*np.nonzero(np.abs(sums - 1.0) > PROB_TOL)):
        problems.append(f"transition row (s={s}, a={a}) sums to {sums[s, a]!r}")
    d0 = mdp.initial_dist
    if np.any(d0 < 0):
        problems.append("negative initial probability at states " + str(np.flatnonzero(d0 < 0).tolist()))
    if abs(d0.sum() - 1.0) > PROB_TOL:
        problems.append(f"initial distribution sums to {d0.sum()!r}")
    if not 0.0 <= mdp.discount < 1.0:
        problems.append(f"discount must be < 1 and >= 0, got {mdp.discount!r}")
    return ValidationReport(tuple(problems))


def uniform_policy(mdp: TabularMdp) -> StationaryPolicy:
    return StationaryPolicy(np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions))


def expected_reward(mdp: TabularMdp, reward: RewardTable) -> np.ndarray:
    """``R[s, a] = sum_s2 p(s2 | s, a) r(s, a, s2)``."""
    if reward.shape != mdp.transition.shape:
        raise ShapeError(f"reward shape {reward.shape} does not match MDP {mdp.transition.shape}")
    return np.einsum("ijk,ijk->ij", mdp.transition, reward.values)


def check_policy(mdp: TabularMdp, policy: StationaryPolicy):
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ShapeError(
            f"policy shape {policy.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )


# -- text serialization -------------------------------------------------------


def _fmt_row(row) -> str:
    return " ".join(repr(float(x)) for x in row)


def _write_atomic(path, lines):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
    os.replace(tmp, path)


def _read_lines(path, header):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != header:
        raise ValueError(f"{path}: expected header {header!r}")
    return lines[1:]


def _parse_rows(lines, n_rows, n_cols, path):
    if len(lines) < n_rows:
        raise ValueError(f"{path}: expected {n_rows} value rows, found {len(lines)}")
    out = np.empty((n_rows, n_cols))
    for i in range(n_rows):
        fields = lines[i].split()
        if len(fields) != n_cols:
            raise ValueError(f"{path}: row {i} has {len(fields)} values, expected {n_cols}")
        out[i] = [float(x) for x in fields]
    return out


def mdp_lines(mdp: TabularMdp):
    S, A = mdp.n_states, mdp.n_actions
    lines = [MDP_HEADER, f"{S} {A}", repr(mdp.discount), _fmt_row(mdp.initial_dist)]
    lines.extend(_fmt_row(row) for row in mdp.transition.reshape(S * A, S))
    return lines


def write_mdp(mdp: TabularMdp, path):
    _write_atomic(path, mdp_lines(mdp))


def read_mdp(path) -> TabularMdp:
    lines = _read_lines(path, MDP_HEADER)
    S, A = (int(x) for x in lines[0].split())
    discount = float(lines[1])
    d0 = _parse_rows(lines[2:3], 1, S, path)[0]
    p = _parse_rows(lines[3:], S * A, S, path).reshape(S, A, S)
    return TabularMdp(p, d0, discount)


def reward_lines(reward: RewardTable):
    S, A, _ = reward.shape
    lines = [REWARD_HEADER, f"{S} {A}", repr(reward.bound)]
    lines.extend(_fmt_row(row) for row in reward.values.reshape(S * A, S))
    return lines


def write_reward(reward: RewardTable, path):
    _write_atomic(path, reward_lines(reward))


def read_reward(path) -> RewardTable:
    lines = _read_lines(path, REWARD_HEADER)
    S, A = (int(x) for x in lines[0].split())
    bound = float(lines[1])
    values = _parse_rows(lines[2:], S * A, S, path).reshape(S, A, S)
    return RewardTable(values, bound)


def policy_lines(policy: StationaryPolicy):
    S, A = policy.probs.shape
    return [POLICY_HEADER, f"{S} {A}"] + [_fmt_row(row) for row in policy.probs]


def write_policy(policy: StationaryPolicy, path):
    _write_atomic(path, policy_lines(policy))


def read_policy(path) -> StationaryPolicy:
    lines = _read_lines(path, POLICY_HEADER)
    S, A = (int(x) for x in lines[0].split())
    return StationaryPolicy(_parse_rows(lines[1:], S, A, path))
