"""Continuing driving gridworld with exact dynamics.

The road has four columns ``[ditch, road, road, ditch]``; the car sits on the
bottom row and sees ``vision_rows`` rows ahead. Row 0 of an obstacle is the
row directly in front of the car. Each half of the board (columns {0, 1} and
{2, 3}) holds at most one obstacle.

One step with action ``a`` at speed ``v``:

1. accelerate/brake change the speed by one (clamped to ``[0, v_max]``), but
   the car still travels ``v`` spaces this step. A lane change travels
   ``v - 1`` spaces in the neighbouring column; at speed 0 it does nothing and
   at the board edge the column stays put while the shorter travel remains.
2. Obstacles shift down by the travelled distance. An obstacle the car sweeps
   over in its column is a collision; swept obstacles disappear.
3. Each vacant half spawns into the newly revealed rows, nearest row first,
   with probability ``spawn_prob`` per row at a uniformly chosen allowed
   column. Spawning in a half stops after one obstacle.
4. Reward: +1 per space travelled, -2 per space travelled in a ditch and
   ``-2 v`` per collision.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Tuple

import numpy as np

from .errors import ConfigError
from .mdp_core import RewardTable, StationaryPolicy, TabularMdp, _write_atomic
from .policy_eval import DEFAULT_TOL, evaluate_policy, expected_return

N_COLUMNS = 4
DITCH_COLUMNS = (0, 3)
ROAD_COLUMNS = (1, 2)
LEFT_HALF = (0, 1)
RIGHT_HALF = (2, 3)

LEFT, RIGHT, ACCELERATE, BRAKE, CRUISE = range(5)
ACTION_NAMES = ("left", "right", "accelerate", "brake", "cruise")
N_ACTIONS = len(ACTION_NAMES)

FAMILIAR_OBSTACLES = (0, 3)
NOVEL_OBSTACLES = (0, 1, 2, 3)


@dataclass(frozen=True)
class GridConfig:
    vision_rows: int = 2
    spawn_prob: float = 0.5
    obstacle_columns: Tuple[int, ...] = FAMILIAR_OBSTACLES
    discount: float = 0.99
    edge_lane_change_moves: bool = True  # shorter travel still applies at the board edge
    seed: int = 0

    def __post_init__(self):
        if self.vision_rows < 1:
            raise ConfigError("vision_rows must be at least 1")
        if not 0.0 <= self.spawn_prob <= 1.0:
            raise ConfigError("spawn_prob must lie in [0, 1]")
        cols = tuple(sorted(set(int(c) for c in self.obstacle_columns)))
        if any(c not in range(N_COLUMNS) for c in cols):
            raise ConfigError(f"obstacle columns must lie in 0..{N_COLUMNS - 1}")
        object.__setattr__(self, "obstacle_columns", cols)
        if not 0.0 <= self.discount < 1.0:
            raise ConfigError("discount must lie in [0, 1)")

    @property
    def speed_limit(self) -> int:
        return self.vision_rows + 1

    def half_columns(self, half: int):
        cols = LEFT_HALF if half == 0 else RIGHT_HALF
        return tuple(c for c in cols if c in self.obstacle_columns)

    @classmethod
    def familiar(cls, **kwargs):
        return cls(obstacle_columns=FAMILIAR_OBSTACLES, **kwargs)

    @classmethod
    def novel(cls, **kwargs):
        return cls(obstacle_columns=NOVEL_OBSTACLES, **kwargs)


class DrivingState(NamedTuple):
    car_column: int
    speed: int
    left_obstacle: Optional[Tuple[int, int]]  # (row, column) in columns {0, 1}
    right_obstacle: Optional[Tuple[int, int]]  # (row, column) in columns {2, 3}


@dataclass(frozen=True)
class SafetyStats:
    discounted_speed: float
    discounted_collision_rate: float
    discounted_collision_speed: float


def _half_options(config: GridConfig, half: int):
    return [None] + [(r, c) for r in range(config.vision_rows) for c in config.half_columns(half)]


def enumerate_states(config: GridConfig):
    """All states ordered by (car column, speed, left obstacle, right obstacle)."""
    return [
        DrivingState(col, speed, left, right)
        for col in range(N_COLUMNS)
        for speed in range(config.speed_limit + 1)
        for left in _half_options(config, 0)
        for right in _half_options(config, 1)
    ]


class StateIndex:
    """Two-way map between states and their enumeration index."""

    def __init__(self, config: GridConfig):
        self.states = enumerate_states(config)
        self._index = {s: i for i, s in enumerate(self.states)}

    def __len__(self):
        return len(self.states)

    def index_of(self, state: DrivingState) -> int:
        return self._index[state]

    def state_of(self, index: int) -> DrivingState:
        return self.states[index]


@dataclass(frozen=True)
class _Move:
    """Deterministic part of a step, before obstacles spawn."""

    column: int
    speed: int
    forward: int
    collided: bool
    obstacles: tuple  # (left, right) after shifting
    reward: float


def _move(config: GridConfig, state: DrivingState, action: int) -> _Move:
    if action not in range(N_ACTIONS):
        raise ValueError(f"invalid action {action!r}")
    speed = state.speed
    new_speed = speed
    if action == ACCELERATE:
        new_speed = min(speed + 1, config.speed_limit)
    elif action == BRAKE:
        new_speed = max(speed - 1, 0)

    column, forward = state.car_column, speed
    if action in (LEFT, RIGHT):
        if speed == 0:
            forward = 0
        else:
            shifted = column + (-1 if action == LEFT else 1)
            if 0 <= shifted < N_COLUMNS:
                column, forward = shifted, speed - 1
            elif config.edge_lane_change_moves:
                forward = speed - 1

    collided = False
    remaining = []
    for obstacle in (state.left_obstacle, state.right_obstacle):
        if obstacle is None:
            remaining.append(None)
            continue
        row, col = obstacle
        if row < forward:
            collided = collided or col == column
            remaining.append(None)
        else:
            remaining.append((row - forward, col))

    reward = float(forward)
    if column in DITCH_COLUMNS:
        reward -= 2.0 * forward
    if collided:
        reward -= 2.0 * speed
    return _Move(column, new_speed, forward, collided, tuple(remaining), reward)


def _spawn_distribution(config: GridConfig, half: int, current, forward: int):
    """``[(prob, obstacle or None)]`` for one half after the board shifts."""
    cols = config.half_columns(half)
    revealed = min(forward, config.vision_rows)
    if current is not None or not cols or revealed == 0:
        return [(1.0, current)]
    p = config.spawn_prob
    outcomes = []
    survive = 1.0
    for row in range(config.vision_rows - revealed, config.vision_rows):
        for col in cols:
            outcomes.append((survive * p / len(cols), (row, col)))
        survive *= 1.0 - p
    outcomes.append((survive, None))
    return [(prob, obs) for prob, obs in outcomes if prob > 0.0]


def successors(config: GridConfig, state: DrivingState, action: int):
    """Exact ``[(probability, next_state, reward)]`` for one step."""
    move = _move(config, state, action)
    left = _spawn_distribution(config, 0, move.obstacles[0], move.forward)
    right = _spawn_distribution(config, 1, move.obstacles[1], move.forward)
    out = {}
    for (pl, ol), (pr, orr) in itertools.product(left, right):
        nxt = DrivingState(move.column, move.speed, ol, orr)
        out[nxt] = out.get(nxt, 0.0) + pl * pr
    return [(prob, nxt, move.reward) for nxt, prob in out.items()]


def simulate_step(config: GridConfig, state: DrivingState, action: int, rng):
    """Sample one step procedurally: ``(next_state, reward, collided)``."""
    move = _move(config, state, action)
    obstacles = list(move.obstacles)
    revealed = min(move.forward, config.vision_rows)
    for half in (0, 1):
        cols = config.half_columns(half)
        if obstacles[half] is not None or not cols:
            continue
        for row in range(config.vision_rows - revealed, config.vision_rows):
            if rng.random() < config.spawn_prob:
                obstacles[half] = (row, cols[rng.integers(len(cols))])
                break
    return DrivingState(move.column, move.speed, *obstacles), move.reward, move.collided


def initial_distribution(config: GridConfig, index: StateIndex) -> np.ndarray:
    """Uniform over obstacle-free states at speed 1 on a road column."""
    d0 = np.zeros(len(index))
    starts = [index.index_of(DrivingState(c, 1, None, None)) for c in ROAD_COLUMNS]
    d0[starts] = 1.0 / len(starts)
    return d0


@dataclass(frozen=True, eq=False)
class GridTables:
    """Tabular MDP plus per-(s, a) step quantities."""

    mdp: TabularMdp
    index: StateIndex
    reward: np.ndarray  # (S, A)
    speed: np.ndarray  # (S, A) speed at the start of the step
    collision: np.ndarray  # (S, A) 1.0 when the step hits an obstacle
    collision_speed: np.ndarray = field(repr=False)


def build_tables(config: GridConfig) -> GridTables:
    index = StateIndex(config)
    S = len(index)
    p = np.zeros((S, N_ACTIONS, S))
    reward = np.zeros((S, N_ACTIONS))
    speed = np.zeros((S, N_ACTIONS))
    collision = np.zeros((S, N_ACTIONS))
    for s, state in enumerate(index.states):
        for a in range(N_ACTIONS):
            move = _move(config, state, a)
            reward[s, a] = move.reward
            speed[s, a] = state.speed
            collision[s, a] = float(move.collided)
            for prob, nxt, _ in successors(config, state, a):
                p[s, a, index.index_of(nxt)] += prob
    mdp = TabularMdp(p, initial_distribution(config, index), config.discount)
    return GridTables(mdp, index, reward, speed, collision, speed * collision)


def _sa_table(values: np.ndarray) -> RewardTable:
    S, A = values.shape
    view = np.broadcast_to(values[:, :, None], (S, A, S))
    return RewardTable(view, float(np.max(np.abs(values))))


def to_tabular_mdp(config: GridConfig):
    """Dense MDP over enumerated states and its reward table.

    The reward of a step is fixed by ``(s, a)``, so ``r(s, a, .)`` is constant.
    """
    tables = build_tables(config)
    return tables.mdp, _sa_table(tables.reward)


def encode_features(config: GridConfig, state: DrivingState) -> np.ndarray:
    """Four binary channels (pavement, ditch, car, obstacle) plus one-hot speed.

    Each channel is a ``(vision_rows + 1) x 4`` grid whose row 0 is the car
    row and row ``i + 1`` is obstacle row ``i``.
    """
    rows = config.vision_rows + 1
    grid = np.zeros((4, rows, N_COLUMNS))
    grid[0][:, list(ROAD_COLUMNS)] = 1.0
    grid[1][:, list(DITCH_COLUMNS)] = 1.0
    grid[2, 0, state.car_column] = 1.0
    for obstacle in (state.left_obstacle, state.right_obstacle):
        if obstacle is not None:
            grid[3, obstacle[0] + 1, obstacle[1]] = 1.0
    speed = np.zeros(config.speed_limit + 1)
    speed[state.speed] = 1.0
    return np.concatenate([grid.ravel(), speed])


def feature_matrix(config: GridConfig, index: StateIndex = None) -> np.ndarray:
    index = StateIndex(config) if index is None else index
    return np.array([encode_features(config, s) for s in index.states])


def reward_examples(config: GridConfig, index: StateIndex = None):
    """Distinct ``(state, next_state, reward)`` index triples over all actions."""
    index = StateIndex(config) if index is None else index
    seen = set()
    out = []
    for s, state in enumerate(index.states):
        for a in range(N_ACTIONS):
            for _, nxt, reward in successors(config, state, a):
                key = (s, index.index_of(nxt), reward)
                if key not in seen:
                    seen.add(key)
                    out.append(key)
    return out


def reachable_states(mdp: TabularMdp, policy: StationaryPolicy) -> np.ndarray:
    """Sorted indices of states reachable from ``d0`` under ``policy``."""
    p_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition) > 0
    seen = mdp.initial_dist > 0
    frontier = seen.copy()
    while frontier.any():
        nxt = p_pi[frontier].any(axis=0) & ~seen
        seen |= nxt
        frontier = nxt
    return np.flatnonzero(seen)


def safety_stats(config: GridConfig, mdp: TabularMdp, policy: StationaryPolicy, tol=DEFAULT_TOL, tables=None) -> SafetyStats:
    """Normalized discounted speed, collision rate and collision speed from ``d0``.

    Only states reachable from ``d0`` under ``policy`` enter the solve, so
    statistics that are zero along every reachable path come out exactly zero.
    """
    tables = build_tables(config) if tables is None else tables
    if tables.mdp.transition.shape != mdp.transition.shape:
        raise ValueError("MDP does not match the gridworld configuration")
    keep = reachable_states(mdp, policy)
    sub = TabularMdp(mdp.transition[np.ix_(keep, np.arange(mdp.n_actions), keep)], mdp.initial_dist[keep], mdp.discount)
    sub_policy = StationaryPolicy(policy.probs[keep])
    out = []
    for stat in (tables.speed, tables.collision, tables.collision_speed):
        value = evaluate_policy(sub, sub_policy, _sa_table(stat[keep]), tol, method="direct")
        out.append(expected_return(value, sub.initial_dist))
    return SafetyStats(*out)


def stat_tables(tables: GridTables):
    """Pseudo-reward tables for the three safety statistics."""
    return {
        "speed": _sa_table(tables.speed),
        "collision": _sa_table(tables.collision),
        "collision_speed": _sa_table(tables.collision_speed),
    }


def render(config: GridConfig, state: DrivingState) -> str:
    """ASCII frame: far rows first, car row last, speed digit on the right."""
    lines = []
    for grid_row in range(config.vision_rows, -1, -1):
        cells = ["d" if c in DITCH_COLUMNS else "." for c in range(N_COLUMNS)]
        if grid_row == 0:
            cells[state.car_column] = "C"
        for obstacle in (state.left_obstacle, state.right_obstacle):
            if obstacle is not None and obstacle[0] + 1 == grid_row:
                cells[obstacle[1]] = "X"
        cells.append(str(state.speed) if grid_row == 0 else " ")
        lines.append("".join(cells))
    return "\n".join(lines)


# -- config file ----------------------------------------------------------------

CONFIG_KEYS = ("vision_rows", "spawn_prob", "obstacle_columns", "discount", "seed")


def parse_config_text(text: str) -> GridConfig:
    values = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown gridworld config key {key!r}")
        values[key] = value
    kwargs = {}
    if "vision_rows" in values:
        kwargs["vision_rows"] = int(values["vision_rows"])
    if "spawn_prob" in values:
        kwargs["spawn_prob"] = float(values["spawn_prob"])
    if "obstacle_columns" in values:
        kwargs["obstacle_columns"] = tuple(int(c) for c in values["obstacle_columns"].split(",") if c.strip())
    if "discount" in values:
        kwargs["discount"] = float(values["discount"])
    if "seed" in values:
        kwargs["seed"] = int(values["seed"])
    return GridConfig(**kwargs)


def read_config(path) -> GridConfig:
    return parse_config_text(Path(path).read_text())


def write_config(config: GridConfig, path):
    _write_atomic(
        path,
        [
            f"vision_rows = {config.vision_rows}",
            f"spawn_prob = {config.spawn_prob!r}",
            "obstacle_columns = " + ",".join(str(c) for c in config.obstacle_columns),
            f"discount = {config.discount!r}",
            f"seed = {config.seed}",
        ],
    )
