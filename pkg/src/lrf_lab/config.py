"""Experiment configuration files (YAML) and the shipped presets.

See ``docs/config.md`` for the schema. Every validation error carries the line
of the offending key so the CLI can print ``path:line: message``.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .constraint import ConstraintTargets
from .domain import ValidationError
from .models import TrainConfig
from .simulator import WorldConfig
from .trainer import POLICY_KINDS, ArchChange, BufferConfig, LoopConfig

PRESET_ALIASES = {"ablation-lift": "ablate-lift"}
TOP_LEVEL = {"preset", "seed", "iterations", "epsilon", "output_dir", "algorithm", "policy",
             "fixed_weights", "solver", "eval_trajectories", "world", "train", "model",
             "buffer", "targets", "arch_change"}
TRAIN_KEYS = {"learning_rate", "batch_size", "steps_per_iteration", "stop_gradient"}


class ConfigError(ValidationError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.message = message
        self.line = line
        self.source = source
        super().__init__(self.render())

    def render(self) -> str:
        where = self.source or "<config>"
        if self.line is not None:
            where = f"{where}:{self.line}"
        return f"{where}: {self.message}"


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig
    train: TrainConfig
    buffer: BufferConfig
    targets: ConstraintTargets | None
    epsilon: float
    iterations: int
    output_dir: str
    preset: str | None = None
    seed: int = 0
    algorithm: int = 1
    policy: str = "lrf"
    hidden: tuple[int, ...] = (32, 32)
    fixed_weights: tuple[float, ...] | None = None
    arch_change: ArchChange | None = None
    solver: str = "sequential"
    eval_trajectories: int = 0
    raw: dict = dataclasses.field(default_factory=dict, compare=False, repr=False)

    def loop_config(self) -> LoopConfig:
        return LoopConfig(train=self.train, buffer=self.buffer, epsilon=self.epsilon,
                          seed=self.seed, policy=self.policy, hidden=self.hidden,
                          fixed_weights=self.fixed_weights, arch_change=self.arch_change,
                          solver=self.solver)

    @property
    def final_hidden(self) -> tuple[int, ...]:
        if self.arch_change is not None and self.arch_change.iteration < self.iterations:
            return tuple(self.arch_change.hidden)
        return self.hidden

    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canon.encode()).hexdigest()


# --------------------------------------------------------------------------
# YAML with line numbers
# --------------------------------------------------------------------------

def _line_map(node, prefix=(), out=None) -> dict:
    """Map key paths to 1-based line numbers using the composed YAML tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (key_node.value,)
            out[path] = key_node.start_mark.line + 1
            _line_map(value_node, path, out)
    return out


def _parse_yaml(text: str, source: str) -> tuple[dict, dict]:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ConfigError(f"YAML syntax error: {exc.problem}", line, source) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", 1, source)
    return data, (_line_map(node) if node is not None else {})


def preset_names() -> list[str]:
    root = resources.files("lrf_lab") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_preset_dict(name: str) -> dict:
    name = PRESET_ALIASES.get(name, name)
    path = resources.files("lrf_lab") / "presets" / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return yaml.safe_load(path.read_text()) or {}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path, seed: int | None = None,
                output_dir: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", source=str(path))
    data, lines = _parse_yaml(path.read_text(), str(path))
    return build_config(data, lines, str(path), seed=seed, output_dir=output_dir)


def config_from_dict(data: dict, seed: int | None = None,
                     output_dir: str | None = None) -> ExperimentConfig:
    return build_config(data, {}, "<dict>", seed=seed, output_dir=output_dir)


def build_config(data: dict, lines: dict, source: str, seed: int | None = None,
                 output_dir: str | None = None) -> ExperimentConfig:
    def fail(msg, *path):
        raise ConfigError(msg, lines.get(tuple(path)) if path else None, source)

    for key in data:
        if key not in TOP_LEVEL:
            fail(f"unknown key {key!r}", key)
    preset = data.get("preset")
    if preset is not None:
        try:
            merged = _merge(load_preset_dict(str(preset)), data)
        except ConfigError as exc:
            fail(exc.message, "preset")
    else:
        merged = copy.deepcopy(data)
    if seed is not None:
        merged["seed"] = int(seed)
    if output_dir is not None:
        merged["output_dir"] = str(output_dir)

    def section(name) -> dict:
        value = merged.get(name, {}) or {}
        if not isinstance(value, dict):
            fail(f"{name} must be a mapping", name)
        return value

    def number(value, kind, *path):
        try:
            if kind is int and isinstance(value, float) and not value.is_integer():
                raise ValueError
            if isinstance(value, bool) and kind is not bool:
                raise ValueError
            return kind(value)
        except (TypeError, ValueError):
            fail(f"{'.'.join(path)} must be {kind.__name__}, got {value!r}", *path)

    top_seed = number(merged.get("seed", 0), int, "seed")

    world_raw = dict(section("world"))
    known = set(WorldConfig.field_names())
    world_kwargs = {}
    for k, v in world_raw.items():
        if k not in known:
            fail(f"unknown world key {k!r}", "world", k)
        ftype = int if isinstance(getattr(WorldConfig(), k), int) else float
        world_kwargs[k] = number(v, ftype, "world", k)
    world_kwargs.setdefault("seed", top_seed)
    try:
        world = WorldConfig(**world_kwargs)
    except ValidationError as exc:
        fail(str(exc), "world")

    train_raw = section("train")
    for k in train_raw:
        if k not in TRAIN_KEYS:
            fail(f"unknown train key {k!r}", "train", k)
    try:
        train = TrainConfig(
            learning_rate=number(train_raw.get("learning_rate", 1e-2), float, "train", "learning_rate"),
            batch_size=number(train_raw.get("batch_size", 64), int, "train", "batch_size"),
            steps_per_iteration=number(train_raw.get("steps_per_iteration", 20), int,
                                       "train", "steps_per_iteration"),
            seed=top_seed, gamma=world.gamma,
            stop_gradient=bool(train_raw.get("stop_gradient", True)))
    except ValidationError as exc:
        fail(str(exc), "train")

    buf_raw = section("buffer")
    try:
        buffer = BufferConfig(number(buf_raw.get("capacity", 250), int, "buffer", "capacity"),
                              number(buf_raw.get("K", 50), int, "buffer", "K"))
    except ValidationError as exc:
        fail(str(exc), "buffer")

    model_raw = section("model")
    hidden = tuple(number(h, int, "model", "hidden") for h in model_raw.get("hidden", [32, 32]))
    if not hidden or min(hidden) < 1:
        fail("model.hidden must list positive widths", "model", "hidden")

    algorithm = number(merged.get("algorithm", 1), int, "algorithm")
    if algorithm not in (1, 2):
        fail("algorithm must be 1 or 2", "algorithm")
    policy = str(merged.get("policy", "lrf"))
    if policy not in POLICY_KINDS:
        fail(f"policy must be one of {', '.join(POLICY_KINDS)}", "policy")

    targets = None
    if "targets" in merged and merged["targets"] is not None:
        alpha = section("targets").get("alpha")
        if not isinstance(alpha, list):
            fail("targets.alpha must be a list", "targets")
        try:
            targets = ConstraintTargets(tuple(number(a, float, "targets", "alpha") for a in alpha))
        except ValidationError as exc:
            fail(str(exc), "targets", "alpha")
        if len(targets.alpha) != world.m - 1:
            fail(f"targets.alpha needs {world.m - 1} entries for m={world.m}", "targets", "alpha")
    if algorithm == 2 and targets is None:
        fail("algorithm 2 needs targets.alpha", "algorithm")
    if algorithm == 2 and world.m < 2:
        fail("algorithm 2 needs world.m >= 2", "algorithm")
    if algorithm == 1 and world.m > 1 and policy != "heuristic_fixed_w":
        fail("algorithm 1 needs world.m = 1 (use heuristic_fixed_w for fixed weights)", "algorithm")

    fixed = merged.get("fixed_weights")
    if fixed is not None:
        if not isinstance(fixed, list) or len(fixed) != world.m:
            fail(f"fixed_weights must list {world.m} numbers", "fixed_weights")
        fixed = tuple(number(x, float, "fixed_weights") for x in fixed)
        if fixed[0] != 1.0:
            fail("fixed_weights[0] must be 1", "fixed_weights")

    arch_change = None
    if merged.get("arch_change") is not None:
        ac = section("arch_change")
        arch_change = ArchChange(number(ac.get("iteration"), int, "arch_change", "iteration"),
                                 tuple(number(h, int, "arch_change", "hidden")
                                       for h in ac.get("hidden", [])))
        if not arch_change.hidden:
            fail("arch_change.hidden must list widths", "arch_change")

    epsilon = number(merged.get("epsilon", 0.1), float, "epsilon")
    if not 0.0 <= epsilon <= 1.0:
        fail("epsilon must lie in [0, 1]", "epsilon")
    iterations = number(merged.get("iterations", 30), int, "iterations")
    if iterations < 0:
        fail("iterations must be non-negative", "iterations")
    solver = str(merged.get("solver", "sequential"))
    if solver not in ("sequential", "grid"):
        fail("solver must be 'sequential' or 'grid'", "solver")
    eval_traj = number(merged.get("eval_trajectories", 0), int, "eval_trajectories")

    return ExperimentConfig(
        world=world, train=train, buffer=buffer, targets=targets, epsilon=epsilon,
        iterations=iterations, output_dir=str(merged.get("output_dir", "runs/default")),
        preset=None if preset is None else PRESET_ALIASES.get(str(preset), str(preset)),
        seed=top_seed, algorithm=algorithm, policy=policy, hidden=hidden,
        fixed_weights=fixed, arch_change=arch_change, solver=solver,
        eval_trajectories=eval_traj, raw=merged)
