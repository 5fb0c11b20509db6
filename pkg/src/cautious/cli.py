"""Command-line driver for ensemble training, k-of-N runs and metric export.

Every command reads a key-value manifest (``key = value`` lines, ``#``
comments) and/or flags of the same names. All randomness derives from the
manifest ``seed`` through named sub-streams, so one manifest reproduces an
experiment byte for byte.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure
(non-convergence, belief exhaustion, training divergence).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import re
import sys
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import bandit_tasks as bt
from . import driving_gridworld as dg
from .belief_ensemble import RewardEnsemble
from .errors import BeliefExhaustedError, ConfigError, ConvergenceError
from .kofn_cfr import KofnConfig, run, write_run_log
from .mdp_core import _write_atomic, read_policy, write_policy
from .policy_eval import optimal_policy
from .reward_model import (
    Dataset,
    TrainConfig,
    TrainingError,
    pair_features,
    read_model,
    tabularize,
    train_stack,
    write_model,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
MODEL_MANIFEST = "models.txt"
POLICY_NAME = re.compile(r"^k(\d+)_n(\d+)_rep(\d+)\.pol$")


class UsageError(Exception):
    pass


# -- seeding ----------------------------------------------------------------------


def sub_seed(seed: int, stream: str, *extra: int) -> int:
    """Seed of a named sub-stream, stable across runs and platforms."""
    seq = np.random.SeedSequence([int(seed), zlib.crc32(stream.encode()), *map(int, extra)])
    return int(seq.generate_state(1)[0])


# -- manifest ---------------------------------------------------------------------


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).replace(" ", "").split(",") if x)


@dataclass(frozen=True)
class RunManifest:
    domain: str = "bandit"
    task: str = "ask_for_help"
    ensemble_dir: str = "ensemble"
    output_dir: str = "out"
    seed: int = 0
    # data and training
    n_classes: int = 10
    per_class: int = 100
    n_novel: int = 200
    n_features: int = 8
    cluster_spread: float = 1.0
    novel_shift: float = 10.0
    mean_scale: float = 4.0
    fraction: float = 1.0
    members: int = 50
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.0016
    hidden: int = 32
    weight_decay: float = 0.0
    # gridworld
    vision_rows: int = 2
    spawn_prob: float = 0.5
    discount: float = 0.99
    grid_config: str = ""
    # k-of-N
    k: tuple = (1,)
    n: int = 1
    iterations: int = 100
    output_mode: str = "last"
    eval_tolerance: float = 1e-6
    repetitions: int = 1
    replacement: bool = False
    regime: str = "all_images"
    evaluate_on: str = "novel"
    format: str = "csv"

    def __post_init__(self):
        if self.domain not in ("bandit", "gridworld"):
            raise ConfigError(f"domain must be 'bandit' or 'gridworld', got {self.domain!r}")
        if self.domain == "bandit" and self.task not in bt.TASK_KINDS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")
        if self.members < 1:
            raise ConfigError("members must be at least 1")
        if not self.k or any(k < 1 or k > self.n for k in self.k):
            raise ConfigError(f"every k must satisfy 1 <= k <= N = {self.n}, got {self.k}")
        if self.regime not in bt.REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.evaluate_on not in ("novel", "familiar"):
            raise ConfigError("evaluate_on must be 'novel' or 'familiar'")
        if self.format not in ("csv", "json"):
            raise ConfigError("format must be 'csv' or 'json'")

    def kofn_config(self, k: int, seed: int) -> KofnConfig:
        return KofnConfig(
            k,
            self.n,
            self.iterations,
            self.eval_tolerance,
            self.output_mode,
            seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            hidden=self.hidden,
            weight_decay=self.weight_decay,
        )

    def digest(self) -> str:
        """Hash of every field, in declaration order."""
        text = "\n".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


_CONVERTERS = {int: int, float: float, str: str, bool: _bool, tuple: _int_list}


def _field_types():
    out = {}
    for f in fields(RunManifest):
        default = f.default
        out[f.name] = type(default) if not isinstance(default, bool) else bool
    return out


def parse_manifest_text(text: str) -> dict:
    """``key = value`` pairs; blank lines and ``#`` comments are skipped."""
    types = _field_types()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"manifest line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"manifest line {lineno}: unknown key {key!r}")
        try:
            values[key] = _CONVERTERS[types[key]](value)
        except ValueError as exc:
            raise ConfigError(f"manifest line {lineno}: bad value for {key}: {exc}") from None
    return values


def build_manifest(path=None, overrides=None) -> RunManifest:
    values = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"manifest {p} does not exist")
        values.update(parse_manifest_text(p.read_text()))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunManifest(**values)


# -- output -----------------------------------------------------------------------


def _cell(value):
    if value is None:
        return "n/a"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_table(path: Path, columns, rows, manifest: RunManifest) -> Path:
    """CSV or JSON table with a provenance record (manifest hash and seed)."""
    provenance = f"manifest_sha256={manifest.digest()} seed={manifest.seed}"
    if manifest.format == "json":
        path = path.with_suffix(".json")
        payload = {
            "provenance": {"manifest_sha256": manifest.digest(), "seed": manifest.seed},
            "columns": list(columns),
            "rows": [[None if v is None else (float(v) if isinstance(v, np.floating) else v) for v in r] for r in rows],
        }
        _write_atomic(path, [json.dumps(payload, sort_keys=True)])
        return path
    path = path.with_suffix(".csv")
    lines = [f"# {provenance}", ",".join(columns)]
    lines.extend(",".join(_cell(v) for v in row) for row in rows)
    _write_atomic(path, lines)
    return path


# -- environments -----------------------------------------------------------------


def _task(manifest: RunManifest) -> bt.BanditTaskSpec:
    return bt.BanditTaskSpec(manifest.task, manifest.n_classes)


def _grid_configs(manifest: RunManifest):
    if manifest.grid_config:
        base = dg.read_config(manifest.grid_config)
    else:
        base = dg.GridConfig(
            vision_rows=manifest.vision_rows,
            spawn_prob=manifest.spawn_prob,
            discount=manifest.discount,
            seed=sub_seed(manifest.seed, "spawn"),
        )
    familiar = dataclasses.replace(base, obstacle_columns=dg.FAMILIAR_OBSTACLES)
    novel = dataclasses.replace(base, obstacle_columns=dg.NOVEL_OBSTACLES)
    return familiar, novel


def _contexts(manifest: RunManifest):
    return bt.make_dataset(
        n_classes=manifest.n_classes,
        per_class=manifest.per_class,
        cluster_spread=manifest.cluster_spread,
        novel_shift=manifest.novel_shift,
        seed=sub_seed(manifest.seed, "noise"),
        n_features=manifest.n_features,
        n_novel=manifest.n_novel,
        mean_scale=manifest.mean_scale,
    )


class Environment:
    """Evaluation MDP plus what is needed to tabularize models and score policies."""

    def __init__(self, manifest: RunManifest):
        self.manifest = manifest
        if manifest.domain == "bandit":
            self.task = _task(manifest)
            ens_dir = Path(manifest.ensemble_dir)
            name = f"{manifest.evaluate_on}_contexts.csv"
            path = ens_dir / name
            if path.exists():
                self.contexts = bt.read_contexts_csv(path, familiar=manifest.evaluate_on == "familiar")
            else:
                familiar, novel = _contexts(manifest)
                self.contexts = familiar if manifest.evaluate_on == "familiar" else novel
            index = 0 if manifest.regime == "single_image" else None
            self.mdp, self.true_reward = bt.to_bandit_mdp(self.task, self.contexts, manifest.regime, index)
            self.features = bt.model_inputs(self.task, self.contexts)
            self.mode = "bandit"
            self.shape = (len(self.contexts), self.task.n_actions)
        else:
            familiar, novel = _grid_configs(manifest)
            self.config = familiar if manifest.evaluate_on == "familiar" else novel
            self.tables = dg.build_tables(self.config)
            self.mdp = self.tables.mdp
            self.features = dg.feature_matrix(self.config, self.tables.index)
            self.mode = "gridworld"
            self.shape = (len(self.tables.index), dg.N_ACTIONS)

    def metric_columns(self):
        if self.mode == "bandit":
            return ("help_frequency", "mean_action_index", "accuracy")
        return ("discounted_speed", "discounted_collision_rate", "discounted_collision_speed")

    def metrics(self, policy):
        if self.mode == "bandit":
            m = bt.caution_metrics(policy, self.task, self.contexts)
            return [m[c] for c in self.metric_columns()]
        stats = dg.safety_stats(self.config, self.mdp, policy, self.manifest.eval_tolerance, self.tables)
        return [stats.discounted_speed, stats.discounted_collision_rate, stats.discounted_collision_speed]


def training_data(manifest: RunManifest) -> tuple:
    """Training dataset and any context tables to store beside the ensemble."""
    if manifest.domain == "bandit":
        task = _task(manifest)
        familiar, novel = _contexts(manifest)
        data = bt.training_dataset(task, familiar, manifest.fraction, sub_seed(manifest.seed, "noise", 1))
        return data, {"familiar_contexts.csv": familiar, "novel_contexts.csv": novel}
    familiar, _ = _grid_configs(manifest)
    index = dg.StateIndex(familiar)
    feats = dg.feature_matrix(familiar, index)
    triples = np.array(dg.reward_examples(familiar, index), dtype=float)
    pairs = triples[:, :2].astype(int)
    return Dataset(pair_features(feats, pairs), triples[:, 2:]), {}


def load_models(ensemble_dir):
    directory = Path(ensemble_dir)
    manifest = directory / MODEL_MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no model manifest at {manifest}; run train-ensemble first")
    names = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    return [read_model(directory / name) for name in names]


def load_belief(manifest: RunManifest, env: Environment) -> RewardEnsemble:
    tables = [tabularize(m, env.features, env.shape, env.mode) for m in load_models(manifest.ensemble_dir)]
    return RewardEnsemble(tables, manifest.replacement)


# -- commands ---------------------------------------------------------------------


def cmd_train_ensemble(manifest: RunManifest) -> Path:
    directory = Path(manifest.ensemble_dir)
    directory.mkdir(parents=True, exist_ok=True)
    data, context_tables = training_data(manifest)
    for name, contexts in context_tables.items():
        bt.write_contexts_csv(contexts, directory / name)
    base = sub_seed(manifest.seed, "init")
    config = manifest.train_config()
    width = max(4, len(str(manifest.members - 1)))
    names, rows = [], []
    chunk = 32
    for lo in range(0, manifest.members, chunk):
        seeds = [(base + m) % 2**63 for m in range(lo, min(manifest.members, lo + chunk))]
        for m, model in zip(range(lo, lo + len(seeds)), train_stack(data, config, seeds)):
            name = f"member_{m:0{width}d}.mlp"
            write_model(model, directory / name)
            names.append(name)
            rows.extend((m, epoch + 1, loss) for epoch, loss in enumerate(model.history))
    _write_atomic(directory / MODEL_MANIFEST, names)
    write_table(directory / "training_loss", ("member", "epoch", "loss"), rows, manifest)
    return directory


def cmd_run_kofn(manifest: RunManifest) -> Path:
    env = Environment(manifest)
    belief = load_belief(manifest, env)
    out = Path(manifest.output_dir)
    (out / "policies").mkdir(parents=True, exist_ok=True)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    rows = []
    for k in manifest.k:
        for rep in range(manifest.repetitions):
            seed = manifest.seed + rep
            stream = sub_seed(seed, "shuffle")
            config = manifest.kofn_config(k, stream)
            queue = belief.shuffle(stream)
            stem = f"k{k}_n{manifest.n}_rep{rep}"
            if manifest.domain == "bandit" and manifest.regime == "single_image":
                policy, _ = bt.single_image_policies(queue, config)
            else:
                policy, record = run(env.mdp, queue, config)
                write_run_log(record, out / "runs" / f"{stem}.log", comment=f"seed={seed}")
            write_policy(policy, out / "policies" / f"{stem}.pol")
            rows.append([k, manifest.n, rep, seed, *env.metrics(policy)])
    write_table(out / "metrics", ("k", "n", "repetition", "seed", *env.metric_columns()), rows, manifest)
    return out


def confidence_interval(values):
    """Mean and normal-approximation 95% half-width; ``None`` width for one value."""
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    if len(values) < 2:
        return mean, None
    return mean, float(1.96 * values.std(ddof=1) / math.sqrt(len(values)))


def cmd_baseline(manifest: RunManifest) -> Path:
    env = Environment(manifest)
    belief = load_belief(manifest, env)
    out = Path(manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(belief)):
        policy, _ = optimal_policy(env.mdp, belief.member(i), manifest.eval_tolerance)
        rows.append([i, *env.metrics(policy)])
    columns = env.metric_columns()
    write_table(out / "baseline_members", ("member", *columns), rows, manifest)
    summary = []
    for j, name in enumerate(columns):
        values = [r[j + 1] for r in rows]
        if any(v is None for v in values):
            summary.append([name, None, None, len(values)])
            continue
        mean, half = confidence_interval(values)
        summary.append([name, mean, half, len(values)])
    write_table(out / "baseline_summary", ("metric", "mean", "ci95_halfwidth", "members"), summary, manifest)
    return out


def _policy_files(manifest: RunManifest):
    directory = Path(manifest.output_dir) / "policies"
    if not directory.is_dir():
        raise FileNotFoundError(f"no policies under {directory}; run run-kofn first")
    found = []
    for path in directory.iterdir():
        match = POLICY_NAME.match(path.name)
        if match:
            found.append((tuple(int(g) for g in match.groups()), path))
    if not found:
        raise FileNotFoundError(f"no policy files under {directory}")
    return sorted(found)


def _policy_metrics(manifest: RunManifest, stem: str) -> Path:
    env = Environment(manifest)
    rows = []
    for (k, n, rep), path in _policy_files(manifest):
        rows.append([k, n, rep, *env.metrics(read_policy(path))])
    return write_table(Path(manifest.output_dir) / stem, ("k", "n", "repetition", *env.metric_columns()), rows, manifest)


def cmd_gridworld_stats(manifest: RunManifest) -> Path:
    if manifest.domain != "gridworld":
        raise ConfigError("gridworld-stats needs domain = gridworld")
    return _policy_metrics(manifest, "gridworld_stats")


def cmd_bandit_metrics(manifest: RunManifest) -> Path:
    if manifest.domain != "bandit":
        raise ConfigError("bandit-metrics needs domain = bandit")
    return _policy_metrics(manifest, "bandit_metrics")


COMMANDS = {
    "train-ensemble": cmd_train_ensemble,
    "run-kofn": cmd_run_kofn,
    "baseline": cmd_baseline,
    "gridworld-stats": cmd_gridworld_stats,
    "bandit-metrics": cmd_bandit_metrics,
}


# -- argument parsing -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cautious", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    types = _field_types()
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--manifest", help="key-value manifest file")
        for field_name, typ in types.items():
            p.add_argument("--" + field_name.replace("_", "-"), dest=field_name, type=_CONVERTERS[typ], default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        overrides = {k: v for k, v in vars(args).items() if k not in ("command", "manifest")}
        manifest = build_manifest(args.manifest, overrides)
        result = COMMANDS[args.command](manifest)
    except (UsageError, ConfigError, FileNotFoundError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConvergenceError, BeliefExhaustedError, TrainingError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
