"""Reward-ensemble beliefs consumed as a queue of samples.

Each ensemble member is one reward table. A run shuffles the queue once and
then pulls ``N`` members per iteration without replacement; estimators that
target the belief's expectation draw with replacement instead.

On disk an ensemble is a directory holding one ``CAUTIOUS-REW`` file per
member plus ``ensemble.txt``, which lists member filenames in queue order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import BeliefExhaustedError, ShapeError
from .mdp_core import RewardTable, _write_atomic, read_reward, write_reward

MANIFEST_NAME = "ensemble.txt"


class RewardEnsemble:
    """Ordered reward tables with a draw cursor.

    Members keep their construction (seed) order; ``order`` is the queue
    permutation applied by :meth:`shuffle`. Draws report original member
    indices so run logs identify models independently of the shuffle.
    """

    def __init__(self, members, replacement=False, seed=0, order=None):
        members = list(members)
        if not members:
            raise ValueError("an ensemble needs at least one member")
        shape = members[0].shape
        for i, table in enumerate(members):
            if table.shape != shape:
                raise ShapeError(f"member {i} has shape {table.shape}, expected {shape}")
        bound = max(t.bound for t in members)
        self._tables = [t if t.bound == bound else RewardTable(t.values, bound) for t in members]
        self.bound = bound
        self.replacement = bool(replacement)
        self.seed = seed
        self.order = np.arange(len(members)) if order is None else np.asarray(order, dtype=int)
        self.cursor = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self._tables)

    @property
    def shape(self):
        return self._tables[0].shape

    @property
    def members(self):
        """Tables in queue order."""
        return [self._tables[i] for i in self.order]

    def member(self, index: int) -> RewardTable:
        """Table by original (construction-order) index."""
        return self._tables[index]

    @property
    def remaining(self) -> int:
        return len(self) - self.cursor

    def shuffle(self, seed) -> "RewardEnsemble":
        """New ensemble with a seed-determined queue order and a fresh cursor."""
        rng = np.random.default_rng(seed)
        order = self.order[rng.permutation(len(self))]
        return RewardEnsemble(self._tables, self.replacement, seed, order)

    def with_replacement(self, replacement=True, seed=None) -> "RewardEnsemble":
        return RewardEnsemble(
            self._tables, replacement, self.seed if seed is None else seed, self.order
        )

    def draw_indices(self, n: int) -> np.ndarray:
        """Original member indices of the next ``n`` draws."""
        if n < 0:
            raise ValueError("cannot draw a negative number of members")
        if self.replacement:
            return self.order[self._rng.integers(0, len(self), size=n)]
        if n > self.remaining:
            raise BeliefExhaustedError(n, self.remaining)
        picked = self.order[self.cursor : self.cursor + n]
        self.cursor += n
        return picked.copy()

    def draw(self, n: int):
        return [self._tables[i] for i in self.draw_indices(n)]

    def mean_reward(self) -> RewardTable:
        return mean_reward(self)


def mean_reward(ensemble: RewardEnsemble) -> RewardTable:
    """Elementwise mean over all members."""
    if len(ensemble) == 0:
        raise ValueError("empty ensemble")
    total = np.zeros(ensemble.shape)
    for table in ensemble._tables:
        total += table.values
    return RewardTable(total / len(ensemble), ensemble.bound)


def synthetic_belief(base: RewardTable, noise_scale, members: int, seed, bound=None) -> RewardEnsemble:
    """Ensemble of ``base`` plus independent Gaussian noise per member.

    ``noise_scale[s, a]`` is the standard deviation for every entry
    ``(s, a, .)``. Entries are clipped to ``[-U, U]`` with
    ``U = max|base| + 6 max(noise_scale)`` unless ``bound`` is given.
    """
    noise_scale = np.asarray(noise_scale, dtype=float)
    S, A, _ = base.shape
    if noise_scale.shape != (S, A):
        raise ShapeError(f"noise_scale must be ({S}, {A}), got {noise_scale.shape}")
    if np.any(noise_scale < 0):
        raise ValueError("noise_scale must be nonnegative")
    if bound is None:
        bound = float(np.max(np.abs(base.values))) + 6.0 * float(np.max(noise_scale))
    rng = np.random.default_rng(seed)
    tables = []
    for _ in range(members):
        noise = rng.standard_normal(base.shape) * noise_scale[:, :, None]
        tables.append(RewardTable(np.clip(base.values + noise, -bound, bound), bound))
    return RewardEnsemble(tables)


def write_ensemble(ensemble: RewardEnsemble, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(ensemble) - 1)))
    names = []
    for idx in ensemble.order:
        name = f"member_{idx:0{width}d}.rew"
        write_reward(ensemble.member(int(idx)), directory / name)
        names.append(name)
    _write_atomic(directory / MANIFEST_NAME, names)
    return directory


def read_ensemble(directory, replacement=False, seed=0) -> RewardEnsemble:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no ensemble manifest at {manifest}")
    names = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    return RewardEnsemble([read_reward(directory / n) for n in names], replacement, seed)
