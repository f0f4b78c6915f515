"""On-policy Monte Carlo training loops, comparison policies and policy evaluation."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .constraint import (
    ConstraintTargets,
    NoExplorationData,
    WeightVector,
    all_correlations,
    build_eval_set,
    solve_weights,
)
from .domain import Trajectory, ValidationError
from .models import (
    Architecture,
    ModelParams,
    TrainConfig,
    init_params,
    predict_batch,
    train_iteration_with_stats,
)
from .ranker import explore_batch, order_by_scores, score_items
from .simulator import GroundTruth, rollout_batch, sample_returns

log = logging.getLogger(__name__)

POLICY_KINDS = ("lrf", "ctr_only", "ctr_descending", "no_lift", "two_model", "heuristic_fixed_w")


@dataclass(frozen=True)
class BufferConfig:
    capacity: int = 250
    K: int = 50

    def __post_init__(self) -> None:
        if not self.capacity >= self.K >= 1:
            raise ValidationError("buffer needs capacity >= K >= 1")


class TrajectoryBuffer:
    """FIFO store of whole trajectories; the oldest are evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValidationError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[Trajectory] = deque(maxlen=capacity)

    def push(self, traj: Trajectory) -> None:
        self._items.append(traj)

    def extend(self, trajs: Sequence[Trajectory]) -> None:
        self._items.extend(trajs)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self._items)


@dataclass(frozen=True, eq=False)
class PolicySnapshot:
    params: ModelParams
    weights: WeightVector
    epsilon: float = 0.0
    score_kind: str = "cascade"
    drop_abandon_value: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValidationError("epsilon must lie in [0, 1]")
        if self.weights.m != self.params.arch.m:
            raise ValidationError("weight dimension does not match model output")


class ModelPolicy:
    """Serve a snapshot: score every candidate, sort, then maybe promote one at random."""

    def __init__(self, snapshot: PolicySnapshot, epsilon: float | None = None):
        self.snapshot = snapshot
        self.epsilon = snapshot.epsilon if epsilon is None else epsilon

    def scores(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        snap = self.snapshot
        bb = predict_batch(snap.params, users, items)
        lift = bb.r_lift
        if snap.drop_abandon_value:
            lift = lift + bb.r_abd[:, None, :]
        return score_items(bb.p_clk, bb.p_abd, lift @ snap.weights.w, snap.score_kind)

    def act(self, user_ids, users, item_ids, items, rng):
        orders = order_by_scores(self.scores(users, items))
        return explore_batch(orders, self.epsilon, rng)


def baseline_policy(kind: str, params: ModelParams, weights: WeightVector | None = None,
                    epsilon: float = 0.0) -> ModelPolicy:
    """Comparison policies built from trained components.

    ``ctr_only`` scores p_clk * <lift, w>; ``ctr_descending`` sorts by p_clk;
    ``no_lift`` treats the abandonment value as zero (scores by the click
    value R_clk); ``two_model`` needs a two-model snapshot and scores
    ratio * (R_clk - R_abd); ``heuristic_fixed_w`` and ``lrf`` serve the ratio
    score with the given weights.
    """
    weights = weights if weights is not None else WeightVector.initial(params.arch.m)
    if kind in ("lrf", "heuristic_fixed_w"):
        snap = PolicySnapshot(params, weights, epsilon)
    elif kind == "ctr_only":
        snap = PolicySnapshot(params, weights, epsilon, score_kind="ctr")
    elif kind == "ctr_descending":
        snap = PolicySnapshot(params, weights, epsilon, score_kind="ctr_descending")
    elif kind == "no_lift":
        snap = PolicySnapshot(params, weights, epsilon,
                              drop_abandon_value=params.arch.variant == "lift")
    elif kind == "two_model":
        if params.arch.variant != "two_model":
            raise ValidationError("two_model baseline needs a two_model snapshot")
        snap = PolicySnapshot(params, weights, epsilon)
    else:
        raise ValidationError(f"unknown baseline kind {kind!r}")
    return ModelPolicy(snap)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PolicyEvaluation:
    platform_mean: np.ndarray
    platform_se: np.ndarray
    surface_mean: np.ndarray
    surface_se: np.ndarray
    num_trajectories: int


def _mean_se(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(x) < 2:
        return x.mean(axis=0), np.full(x.shape[1], np.inf)
    return x.mean(axis=0), x.std(axis=0, ddof=1) / math.sqrt(len(x))


def evaluate_policy(gt: GroundTruth, snapshot, num_trajectories: int,
                    rng: np.random.Generator, *, explore: bool = False,
                    horizon: int | None = None, marginalize: bool = True) -> PolicyEvaluation:
    """Monte Carlo J(pi) per objective, platform-wide and click-sourced.

    ``snapshot`` may be a PolicySnapshot or any policy object. Exploration is
    off unless ``explore`` is set.
    """
    if num_trajectories < 1:
        raise ValidationError("num_trajectories must be at least 1")
    if isinstance(snapshot, PolicySnapshot):
        policy = ModelPolicy(snapshot, epsilon=None if explore else 0.0)
    else:
        policy = snapshot
    samples = sample_returns(gt, policy, num_trajectories, horizon or gt.cfg.horizon, rng,
                             marginalize=marginalize)
    pm, ps = _mean_se(samples.platform)
    sm, ss = _mean_se(samples.surface)
    return PolicyEvaluation(pm, ps, sm, ss, num_trajectories)


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchChange:
    iteration: int
    hidden: tuple[int, ...]


@dataclass(frozen=True)
class LoopConfig:
    """Everything the outer loop needs besides the world."""

    train: TrainConfig = TrainConfig()
    buffer: BufferConfig = BufferConfig()
    epsilon: float = 0.1
    seed: int = 0
    policy: str = "lrf"
    hidden: tuple[int, ...] = (32, 32)
    fixed_weights: tuple[float, ...] | None = None
    arch_change: ArchChange | None = None
    solver: str = "sequential"

    def __post_init__(self) -> None:
        if self.policy not in POLICY_KINDS:
            raise ValidationError(f"unknown policy kind {self.policy!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValidationError("epsilon must lie in [0, 1]")


def metric_columns(m: int) -> list[str]:
    cols = ["iteration", "loss_abd", "loss_lift", "loss_click"]
    cols += [f"j_platform_{i}" for i in range(1, m + 1)]
    cols += [f"j_surface_{i}" for i in range(1, m + 1)]
    cols += [f"w_{i}" for i in range(2, m + 1)]
    cols += [f"corr_{i}" for i in range(1, m + 1)]
    cols += [f"feasible_{i}" for i in range(2, m + 1)]
    cols += ["eval_records"]
    return cols


def _variant(policy: str) -> str:
    return {"no_lift": "no_lift", "two_model": "two_model"}.get(policy, "lift")


def _score_kind(policy: str) -> str:
    return {"ctr_only": "ctr", "ctr_descending": "ctr_descending"}.get(policy, "cascade")


def _derive(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def _derive_int(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def _observed_returns(trajs: Sequence[Trajectory], gamma: float, m: int):
    platform = np.zeros((len(trajs), m))
    surface = np.zeros((len(trajs), m))
    for k, tr in enumerate(trajs):
        disc = gamma ** np.arange(len(tr))
        platform[k] = disc @ tr.rewards
        surface[k] = disc @ (tr.rewards * (tr.click_pos > 0)[:, None])
    return platform.mean(axis=0), surface.mean(axis=0)


def run_loop(gt: GroundTruth, cfg: LoopConfig, iterations: int,
             targets: ConstraintTargets | None = None) -> tuple[PolicySnapshot, list[dict]]:
    """Shared body of both algorithms.

    Per iteration: collect K rollouts with the current snapshot, push them into
    the FIFO buffer, train (abandon, lift, click losses in that order), update
    the weights when ``targets`` is given, and publish a new snapshot.
    """
    world = gt.cfg
    m = world.m
    constrained = targets is not None
    if constrained and m < 2:
        raise ValidationError("constraint optimization needs m >= 2")
    if constrained and len(targets.alpha) != m - 1:
        raise ValidationError(f"need {m - 1} correlation targets, got {len(targets.alpha)}")
    arch = Architecture(world.feature_dim, world.feature_dim, m, cfg.hidden, _variant(cfg.policy))
    params = init_params(arch, _derive_int(cfg.seed, 0))
    if cfg.policy == "heuristic_fixed_w" and cfg.fixed_weights is not None:
        weights = WeightVector(np.asarray(cfg.fixed_weights, dtype=np.float64))
        if weights.m != m:
            raise ValidationError("fixed_weights length does not match m")
    else:
        weights = WeightVector.initial(m)
    snapshot = PolicySnapshot(params, weights, cfg.epsilon, _score_kind(cfg.policy),
                              drop_abandon_value=False)
    buffer = TrajectoryBuffer(cfg.buffer.capacity)
    train_cfg = replace(cfg.train, gamma=world.gamma)
    metrics: list[dict] = []

    for it in range(iterations):
        if cfg.arch_change is not None and it == cfg.arch_change.iteration:
            arch = replace(arch, hidden=tuple(cfg.arch_change.hidden))
            params = init_params(arch, _derive_int(cfg.seed, 0, it))
            snapshot = replace(snapshot, params=params)
        policy = ModelPolicy(snapshot)
        trajs = rollout_batch(gt, policy, cfg.buffer.K, world.horizon,
                              _derive(cfg.seed, 1, it), first_id=it * cfg.buffer.K)
        buffer.extend(trajs)
        params, stats = train_iteration_with_stats(
            params, buffer, replace(train_cfg, seed=_derive_int(cfg.seed, 2, it)))

        row = {"iteration": it, "loss_abd": stats.loss_abd, "loss_lift": stats.loss_lift,
               "loss_click": stats.loss_click}
        jp, js = _observed_returns(trajs, world.gamma, m)
        for i in range(m):
            row[f"j_platform_{i + 1}"] = jp[i]
            row[f"j_surface_{i + 1}"] = js[i]

        corr = np.full(m, np.nan)
        feasible: tuple = ()
        n_eval = 0
        if m > 1 and (constrained or cfg.policy == "heuristic_fixed_w"):
            try:
                records = build_eval_set(buffer, params)
                n_eval = len(records)
                if constrained:
                    sol = solve_weights(records, targets, weights, method=cfg.solver)
                    weights, corr, feasible = sol.weights, sol.correlations, sol.feasible
                else:
                    corr = all_correlations(records, weights)
            except NoExplorationData:
                log.info("iteration %d: no exploration data, weights unchanged", it)
                feasible = (False,) * (m - 1) if constrained else ()
        for i in range(1, m):
            row[f"w_{i + 1}"] = weights.w[i]
        for i in range(m):
            row[f"corr_{i + 1}"] = corr[i]
        for i in range(1, m):
            row[f"feasible_{i + 1}"] = (int(feasible[i - 1]) if feasible else "")
        row["eval_records"] = n_eval
        metrics.append(row)
        snapshot = replace(snapshot, params=params, weights=weights)
    return snapshot, metrics


def run_algorithm1(gt: GroundTruth, cfg: LoopConfig, iterations: int):
    """Single-objective loop; fails unless the world has m = 1."""
    if gt.cfg.m != 1:
        raise ValidationError(f"algorithm 1 expects m = 1, world has m = {gt.cfg.m}")
    return run_loop(gt, cfg, iterations)


def run_algorithm2(gt: GroundTruth, cfg: LoopConfig, targets: ConstraintTargets,
                   iterations: int):
    """Constrained loop: weights start at (1, 0, ..., 0) and are re-solved each iteration."""
    return run_loop(gt, cfg, iterations, targets)
