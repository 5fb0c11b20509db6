"""Small feed-forward reward regressors and their ensembles.

A model is one rectifier hidden layer between affine maps, trained on a
per-output weighted mean-squared error with Adam or plain gradient descent.
Trained models are tabularized over an enumerated state set to become reward
tables, and an ensemble of independently seeded models becomes a belief.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .belief_ensemble import RewardEnsemble
from .errors import CautiousError, ConfigError, ShapeError
from .mdp_core import RewardTable, _fmt_row, _write_atomic

MLP_HEADER = "CAUTIOUS-MLP v1"


class TrainingError(CautiousError, RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.0016
    seed: int = 0
    optimizer: str = "adam"
    hidden: int = 32
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")
        if self.hidden < 1:
            raise ConfigError("hidden width must be at least 1")


@dataclass
class Dataset:
    """Inputs ``(n, D)``, targets ``(n, O)`` and per-output loss weights ``(n, O)``."""

    features: np.ndarray
    targets: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).reshape(len(self.features), -1)
        if self.weights is None:
            self.weights = np.ones_like(self.targets)
        self.weights = np.broadcast_to(np.asarray(self.weights, dtype=float), self.targets.shape).copy()
        if len(self.features) == 0:
            raise ValueError("empty dataset")

    @classmethod
    def from_examples(cls, examples):
        """Build from ``(features, targets, weights)`` triples."""
        feats, targs, weights = zip(*examples)
        return cls(np.array(feats), np.array(targs), np.array(weights))

    def __len__(self):
        return len(self.features)

    def subset(self, index):
        return Dataset(self.features[index], self.targets[index], self.weights[index])


@dataclass
class MlpRewardModel:
    w1: np.ndarray  # (H, D)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (O, H)
    b2: np.ndarray  # (O,)
    history: list = field(default_factory=list, compare=False)

    @classmethod
    def initialize(cls, n_inputs, n_hidden, n_outputs, rng):
        """Uniform fan-in initialization in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
        lim1 = 1.0 / np.sqrt(n_inputs)
        lim2 = 1.0 / np.sqrt(n_hidden)
        return cls(
            rng.uniform(-lim1, lim1, (n_hidden, n_inputs)),
            rng.uniform(-lim1, lim1, n_hidden),
            rng.uniform(-lim2, lim2, (n_outputs, n_hidden)),
            rng.uniform(-lim2, lim2, n_outputs),
        )

    @property
    def n_inputs(self):
        return self.w1.shape[1]

    @property
    def n_outputs(self):
        return self.w2.shape[0]

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, features):
        x = np.asarray(features, dtype=float)
        if x.shape[-1] != self.n_inputs:
            raise ShapeError(f"expected {self.n_inputs} features, got {x.shape[-1]}")
        hidden = np.maximum(x @ self.w1.T + self.b1, 0.0)
        return hidden @ self.w2.T + self.b2

    def loss_and_grads(self, x, y, w):
        """Weighted MSE ``sum(w (f(x) - y)^2) / (B * O)`` and its gradients."""
        pre = x @ self.w1.T + self.b1
        hidden = np.maximum(pre, 0.0)
        err = hidden @ self.w2.T + self.b2 - y
        scale = 1.0 / y.size
        loss = float(np.sum(w * err * err) * scale)
        d_out = 2.0 * scale * w * err
        g_w2 = d_out.T @ hidden
        g_b2 = d_out.sum(axis=0)
        d_pre = (d_out @ self.w2) * (pre > 0)
        g_w1 = d_pre.T @ x
        g_b1 = d_pre.sum(axis=0)
        return loss, [g_w1, g_b1, g_w2, g_b2]

    def loss(self, dataset: Dataset) -> float:
        err = self.forward(dataset.features) - dataset.targets
        return float(np.sum(dataset.weights * err * err) / err.size)


def forward(model: MlpRewardModel, features):
    return model.forward(features)


def train(dataset: Dataset, config: TrainConfig, n_outputs=None) -> MlpRewardModel:
    """Train a fresh model; the initialization and batch order follow ``config.seed``."""
    return train_stack(dataset, config, [config.seed], n_outputs)[0]


def train_stack(dataset: Dataset, config: TrainConfig, seeds, n_outputs=None):
    """Train one independent model per seed, stepping them together.

    Each model owns a generator seeded with its seed, used for its
    initialization and its per-epoch batch order, so the result for a seed
    does not depend on which other seeds share the stack. Stepping the
    models as stacked arrays amortizes the per-step interpreter overhead,
    which dominates for networks this small.
    """
    if not isinstance(dataset, Dataset):
        dataset = Dataset.from_examples(dataset)
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    n_outputs = dataset.targets.shape[1] if n_outputs is None else n_outputs
    rngs = [np.random.default_rng(seed) for seed in seeds]
    inits = [MlpRewardModel.initialize(dataset.features.shape[1], config.hidden, n_outputs, r) for r in rngs]
    w1, b1, w2, b2 = (np.stack(p) for p in zip(*(m.params() for m in inits)))
    params = [w1, b1, w2, b2]
    first = [np.zeros_like(p) for p in params]
    second = [np.zeros_like(p) for p in params]
    beta1, beta2 = config.betas
    lr, wd = config.learning_rate, config.weight_decay
    X, Y, W = dataset.features, dataset.targets, dataset.weights
    n, M = len(dataset), len(seeds)
    histories = [[] for _ in seeds]
    step = 0
    for _ in range(config.epochs):
        orders = np.stack([r.permutation(n) for r in rngs])
        epoch_loss = np.zeros(M)
        for start in range(0, n, config.batch_size):
            idx = orders[:, start : start + config.batch_size]
            x, y, w = X[idx], Y[idx], W[idx]
            pre = np.matmul(x, w1.transpose(0, 2, 1)) + b1[:, None, :]
            hidden = np.maximum(pre, 0.0)
            err = np.matmul(hidden, w2.transpose(0, 2, 1)) + b2[:, None, :] - y
            scale = 1.0 / (y.shape[1] * y.shape[2])
            loss = np.sum(w * err * err, axis=(1, 2)) * scale
            step += 1
            if not np.all(np.isfinite(loss)):
                bad = seeds[int(np.argmin(np.isfinite(loss)))]
                raise TrainingError(f"non-finite loss at step {step} (seed {bad})")
            epoch_loss += loss * idx.shape[1]
            d_out = 2.0 * scale * w * err
            d_pre = np.matmul(d_out, w2) * (pre > 0)
            grads = [
                np.matmul(d_pre.transpose(0, 2, 1), x),
                d_pre.sum(axis=1),
                np.matmul(d_out.transpose(0, 2, 1), hidden),
                d_out.sum(axis=1),
            ]
            for p, g, m, v in zip(params, grads, first, second):
                if wd:
                    g = g + wd * p
                if config.optimizer == "sgd":
                    p -= lr * g
                    continue
                m *= beta1
                m += (1.0 - beta1) * g
                v *= beta2
                v += (1.0 - beta2) * g * g
                m_hat = m / (1.0 - beta1**step)
                v_hat = v / (1.0 - beta2**step)
                p -= lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        for h, value in zip(histories, epoch_loss / n):
            h.append(float(value))
    return [
        MlpRewardModel(w1[i].copy(), b1[i].copy(), w2[i].copy(), b2[i].copy(), histories[i])
        for i in range(M)
    ]


def grad_check(model: MlpRewardModel, example, eps: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``example`` is ``(features, targets)`` or ``(features, targets, weights)``.
    """
    x = np.atleast_2d(np.asarray(example[0], dtype=float))
    y = np.atleast_2d(np.asarray(example[1], dtype=float))
    w = np.ones_like(y) if len(example) < 3 else np.atleast_2d(np.asarray(example[2], dtype=float))
    _, grads = model.loss_and_grads(x, y, w)
    worst = 0.0
    for param, grad in zip(model.params(), grads):
        flat, gflat = param.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = model.loss_and_grads(x, y, w)[0]
            flat[i] = orig - eps
            down = model.loss_and_grads(x, y, w)[0]
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            denom = max(abs(numeric) + abs(gflat[i]), 1e-6)
            worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst


def tabularize(model: MlpRewardModel, state_features, mdp_shape, mode="bandit") -> RewardTable:
    """Reward table from model predictions over an enumerated state set.

    ``bandit`` mode: ``state_features`` is ``(S, D)`` and output ``a`` gives
    ``r(s, a, .)`` for every next state. ``gridworld`` mode: the model reads
    the concatenated features of ``(s, s2)`` and its single output gives
    ``r(s, ., s2)`` for every action. Tables are broadcast views, so memory
    does not grow with the replicated axis.
    """
    n_states, n_actions = mdp_shape
    feats = np.asarray(state_features, dtype=float)
    if feats.ndim != 2 or len(feats) != n_states or not np.all(np.isfinite(feats)):
        raise ValueError(f"state features must be finite and cover all {n_states} states")
    if mode == "bandit":
        if model.n_outputs != n_actions:
            raise ShapeError(f"model has {model.n_outputs} outputs for {n_actions} actions")
        preds = model.forward(feats)
        values = np.broadcast_to(preds[:, :, None], (n_states, n_actions, n_states))
    elif mode == "gridworld":
        dim = feats.shape[1]
        if model.n_inputs != 2 * dim:
            raise ShapeError(f"pair model expects {model.n_inputs} inputs, features give {2 * dim}")
        left = feats @ model.w1[:, :dim].T
        right = feats @ model.w1[:, dim:].T + model.b1
        hidden = np.maximum(left[:, None, :] + right[None, :, :], 0.0)
        preds = hidden @ model.w2[0] + model.b2[0]
        values = np.broadcast_to(preds[:, None, :], (n_states, n_actions, n_states))
    else:
        raise ValueError(f"unknown tabularization mode {mode!r}")
    values.setflags(write=False)
    return RewardTable(values, float(np.max(np.abs(preds))))


def pair_features(state_features, pairs):
    """Concatenated ``(s, s2)`` inputs for gridworld-mode training data."""
    feats = np.asarray(state_features, dtype=float)
    pairs = np.asarray(pairs, dtype=int)
    return np.concatenate([feats[pairs[:, 0]], feats[pairs[:, 1]]], axis=1)


def ensemble_train(
    dataset: Dataset,
    members: int,
    base_seed: int,
    config: TrainConfig,
    state_features,
    mdp_shape,
    mode="bandit",
    return_models=False,
    chunk=32,
):
    """Train ``members`` models with seeds ``base_seed + m`` and tabularize each.

    Models are trained ``chunk`` at a time; the chunk size changes speed only.
    """
    if members < 1:
        raise ConfigError("an ensemble needs at least one member")
    models = []
    for lo in range(0, members, chunk):
        seeds = range(base_seed + lo, base_seed + min(members, lo + chunk))
        models.extend(train_stack(dataset, config, seeds))
    tables = [tabularize(model, state_features, mdp_shape, mode) for model in models]
    ensemble = RewardEnsemble(tables)
    return (ensemble, models) if return_models else ensemble


def model_lines(model: MlpRewardModel):
    hidden, inputs = model.w1.shape
    lines = [MLP_HEADER, f"{inputs} {hidden} {model.n_outputs}"]
    lines.extend(_fmt_row(row) for row in model.w1)
    lines.append(_fmt_row(model.b1))
    lines.extend(_fmt_row(row) for row in model.w2)
    lines.append(_fmt_row(model.b2))
    return lines


def write_model(model: MlpRewardModel, path):
    _write_atomic(path, model_lines(model))


def read_model(path) -> MlpRewardModel:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != MLP_HEADER:
        raise ValueError(f"{path}: expected header {MLP_HEADER!r}")
    inputs, hidden, outputs = (int(x) for x in lines[1].split())
    rows = [np.array([float(x) for x in line.split()]) for line in lines[2:]]
    w1 = np.array(rows[:hidden]).reshape(hidden, inputs)
    b1 = rows[hidden].reshape(hidden)
    w2 = np.array(rows[hidden + 1 : hidden + 1 + outputs]).reshape(outputs, hidden)
    b2 = rows[hidden + 1 + outputs].reshape(outputs)
    return MlpRewardModel(w1, b1, w2, b2)
