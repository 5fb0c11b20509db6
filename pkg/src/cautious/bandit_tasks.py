"""Contextual-bandit caution tasks over labeled Gaussian-cluster contexts.

Four reward families share one context generator:

``ask_for_help``
    ``n_classes + 1`` actions; the correct label pays 1, a wrong label 0 and
    the help action (last index) always pays 0.25.
``risk_reward``
    ``n_classes`` actions; label ``a`` pays ``a + 1`` when correct and
    ``-(a + 2) / 9`` otherwise.
``help_availability``
    ``risk_reward`` plus a help action paying 1/20 when the context's help
    flag is set and -11/9 when it is not.
``perturbed_help``
    ``ask_for_help`` whose training targets get Gaussian noise once.

Tasks become gamma = 0 MDPs whose states are contexts. Familiar contexts carry
a true reward table; novel contexts never do.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .belief_ensemble import RewardEnsemble
from .errors import ConfigError
from .kofn_cfr import KofnConfig, run
from .mdp_core import RewardTable, StationaryPolicy, TabularMdp, _write_atomic
from .policy_eval import optimal_policy
from .reward_model import Dataset

TASK_KINDS = ("ask_for_help", "risk_reward", "help_availability", "perturbed_help")
REGIMES = ("all_images", "single_image")

HELP_REWARD = 0.25
AVAILABLE_HELP_REWARD = 1.0 / 20.0
UNAVAILABLE_HELP_REWARD = -11.0 / 9.0
DEFAULT_TARGET_NOISE = 0.1


@dataclass(frozen=True)
class BanditTaskSpec:
    kind: str = "ask_for_help"
    n_classes: int = 10
    target_noise: float = DEFAULT_TARGET_NOISE

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")

    @property
    def has_help(self) -> bool:
        return self.kind != "risk_reward"

    @property
    def n_actions(self) -> int:
        return self.n_classes + (1 if self.has_help else 0)

    @property
    def help_action(self):
        return self.n_classes if self.has_help else None

    @property
    def uses_help_flag(self) -> bool:
        return self.kind == "help_availability"

    def rewards(self, labels, help_flags=None) -> np.ndarray:
        """True reward of every action for each context, shape ``(n, A)``."""
        labels = np.asarray(labels, dtype=int)
        n, C = labels.size, self.n_classes
        correct = np.zeros((n, C), dtype=bool)
        correct[np.arange(n), labels] = True
        out = np.zeros((n, self.n_actions))
        if self.kind in ("ask_for_help", "perturbed_help"):
            out[:, :C] = correct
            out[:, C] = HELP_REWARD
            return out
        actions = np.arange(C)
        out[:, :C] = np.where(correct, actions + 1.0, -(actions + 2.0) / 9.0)
        if self.kind == "help_availability":
            flags = np.zeros(n, dtype=bool) if help_flags is None else np.asarray(help_flags, dtype=bool)
            out[:, C] = np.where(flags, AVAILABLE_HELP_REWARD, UNAVAILABLE_HELP_REWARD)
        return out

    def loss_weights(self) -> np.ndarray:
        """Per-output loss weights: ``1 / (a + 1)^2`` on labels for the scaled-reward tasks."""
        weights = np.ones(self.n_actions)
        if self.kind in ("risk_reward", "help_availability"):
            weights[: self.n_classes] = 1.0 / (np.arange(self.n_classes) + 1.0) ** 2
        return weights


@dataclass(frozen=True, eq=False)
class Contexts:
    features: np.ndarray  # (n, D)
    labels: np.ndarray  # class (familiar) or source cluster (novel)
    help: np.ndarray  # help-available flags
    familiar: bool = True

    def __len__(self):
        return len(self.labels)

    def subset(self, index):
        index = np.asarray(index)
        return Contexts(self.features[index], self.labels[index], self.help[index], self.familiar)


def make_dataset(
    n_classes=10,
    per_class=100,
    cluster_spread=1.0,
    novel_shift=10.0,
    seed=0,
    n_features=8,
    n_novel=None,
    mean_scale=4.0,
    help_prob=0.5,
):
    """Familiar and novel contexts drawn from labeled Gaussian clusters.

    Class means are ``N(0, mean_scale^2 I)``; a novel cluster moves its class
    mean by ``novel_shift`` along a random unit direction. Novel labels
    record the source cluster and are never used as rewards.
    """
    if per_class < 1 or cluster_spread <= 0:
        raise ConfigError("per_class must be >= 1 and cluster_spread > 0")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, mean_scale, (n_classes, n_features))
    directions = rng.normal(size=(n_classes, n_features))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    novel_means = means + novel_shift * directions

    labels = np.repeat(np.arange(n_classes), per_class)
    familiar = Contexts(
        means[labels] + cluster_spread * rng.normal(size=(labels.size, n_features)),
        labels,
        rng.random(labels.size) < help_prob,
        familiar=True,
    )
    n_novel = labels.size if n_novel is None else n_novel
    novel_labels = np.arange(n_novel) % n_classes
    novel = Contexts(
        novel_means[novel_labels] + cluster_spread * rng.normal(size=(n_novel, n_features)),
        novel_labels,
        rng.random(n_novel) < help_prob,
        familiar=False,
    )
    return familiar, novel


def model_inputs(task: BanditTaskSpec, contexts: Contexts) -> np.ndarray:
    """Network inputs: context features, plus the help flag when it matters."""
    if task.uses_help_flag:
        return np.column_stack([contexts.features, contexts.help.astype(float)])
    return np.asarray(contexts.features, dtype=float)


def training_dataset(task: BanditTaskSpec, contexts: Contexts, fraction=1.0, seed=0) -> Dataset:
    """Regression data for reward models, optionally a seeded subset.

    ``perturbed_help`` targets receive Gaussian noise once, here.
    """
    if not contexts.familiar:
        raise ValueError("novel contexts have no reward function to train on")
    if not 0 < fraction <= 1:
        raise ConfigError("training fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    targets = task.rewards(contexts.labels, contexts.help)
    if task.kind == "perturbed_help":
        targets = targets + rng.normal(0.0, task.target_noise, targets.shape)
    keep = max(1, math.ceil(fraction * len(contexts)))
    index = np.sort(rng.permutation(len(contexts))[:keep])
    data = Dataset(model_inputs(task, contexts), targets, task.loss_weights())
    return data.subset(index)


def to_bandit_mdp(task: BanditTaskSpec, contexts: Contexts, regime="all_images", index=None):
    """gamma = 0 MDP over contexts and, for familiar contexts, the true rewards.

    ``all_images`` starts and transitions uniformly over contexts;
    ``single_image`` uses a point mass at ``index`` and identity transitions.
    """
    S, A = len(contexts), task.n_actions
    if S == 0:
        raise ValueError("no contexts")
    if regime == "all_images":
        transition = np.full((S, A, S), 1.0 / S)
        d0 = np.full(S, 1.0 / S)
    elif regime == "single_image":
        if index is None or not 0 <= index < S:
            raise IndexError(f"single-image index {index!r} out of range for {S} contexts")
        transition = np.broadcast_to(np.eye(S)[:, None, :], (S, A, S))
        d0 = np.zeros(S)
        d0[index] = 1.0
    else:
        raise ConfigError(f"unknown regime {regime!r}")
    mdp = TabularMdp(transition, d0, 0.0)
    if not contexts.familiar:
        return mdp, None
    r = task.rewards(contexts.labels, contexts.help)
    table = RewardTable(np.broadcast_to(r[:, :, None], (S, A, S)), float(np.max(np.abs(r))))
    return mdp, table


def point_mass_mdp(n_actions: int) -> TabularMdp:
    return TabularMdp(np.ones((1, n_actions, 1)), np.ones(1), 0.0)


def restrict_to_state(belief: RewardEnsemble, state: int) -> RewardEnsemble:
    """The belief's rewards at one context, as a one-state ensemble.

    The queue order and draw seed carry over, so the restricted run sees the
    same member sequence as the full one.
    """
    tables = [
        RewardTable(belief.member(i).values[state : state + 1, :, state : state + 1], belief.bound)
        for i in range(len(belief))
    ]
    return RewardEnsemble(tables, belief.replacement, belief.seed, belief.order)


def single_image_policies(belief: RewardEnsemble, config: KofnConfig, states=None):
    """Run k-of-N CFR separately on each context (point-mass start, identity moves).

    Because gamma = 0 decouples contexts, each run is a one-state problem.
    Returns a policy over the selected contexts and the per-context records.
    """
    S, A, _ = belief.shape
    states = range(S) if states is None else states
    mdp = point_mass_mdp(A)
    rows, records = [], []
    for s in states:
        policy, record = run(mdp, restrict_to_state(belief, s), config)
        rows.append(policy.probs[0])
        records.append(record)
    return StationaryPolicy(np.array(rows)), records


def baseline_policies(mdp: TabularMdp, belief: RewardEnsemble, tol=1e-6):
    """Greedy optimal policy for every ensemble member, in member order."""
    return [optimal_policy(mdp, belief.member(i), tol)[0] for i in range(len(belief))]


def caution_metrics(policy: StationaryPolicy, task: BanditTaskSpec, contexts: Contexts, weights=None) -> dict:
    """Help frequency, mean action index and (familiar) accuracy, context-weighted.

    ``weights`` defaults to uniform over contexts (the initial distribution of
    both regimes when averaged over single-image runs).
    """
    probs = policy.probs
    if probs.shape != (len(contexts), task.n_actions):
        raise ValueError("policy does not cover the contexts")
    w = None if weights is None else np.asarray(weights, dtype=float)

    def average(values):
        return np.mean(values, axis=0) if w is None else w @ values

    action_freq = average(probs)
    metrics = {
        "help_frequency": float(action_freq[task.help_action]) if task.has_help else None,
        "mean_action_index": float(action_freq @ np.arange(task.n_actions)),
    }
    if contexts.familiar:
        correct = probs[np.arange(len(contexts)), contexts.labels]
        metrics["accuracy"] = float(average(correct))
    else:
        metrics["accuracy"] = None
    return metrics


def class_action_frequency(policy: StationaryPolicy, contexts: Contexts, n_classes: int) -> np.ndarray:
    """Mean action distribution per (source) class, shape ``(n_classes, A)``."""
    out = np.zeros((n_classes, policy.n_actions))
    for c in range(n_classes):
        mask = contexts.labels == c
        if mask.any():
            out[c] = policy.probs[mask].mean(axis=0)
    return out


# -- CSV contexts -----------------------------------------------------------------


def write_contexts_csv(contexts: Contexts, path):
    D = contexts.features.shape[1]
    rows = [",".join(["label", "help"] + [f"f{i}" for i in range(D)])]
    for label, flag, feats in zip(contexts.labels, contexts.help, contexts.features):
        rows.append(",".join([str(int(label)), str(int(flag))] + [repr(float(x)) for x in feats]))
    _write_atomic(Path(path), rows)


def read_contexts_csv(path, familiar=True) -> Contexts:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["label", "help"]:
            raise ValueError(f"{path}: header must start with 'label,help'")
        rows = [row for row in reader if row]
    labels = np.array([int(r[0]) for r in rows])
    flags = np.array([bool(int(r[1])) for r in rows])
    feats = np.array([[float(x) for x in r[2:]] for r in rows])
    return Contexts(feats, labels, flags, familiar)
