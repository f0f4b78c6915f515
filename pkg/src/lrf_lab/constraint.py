"""Offline evaluation on exploration impressions and the scalarization-weight solver.

Secondary objective ``i`` is constrained through the Pearson correlation between
the observed reward component ``r_v[i]`` of exploration-promoted items and the
weight-combined predicted lift ``<lift(u, v), w>``. For one constraint the
boundary of the feasible set is found in closed form: squaring
``corr(w_i) = alpha_i`` gives a quadratic in ``w_i``, whose real roots are then
checked against the unsquared equation. Several constraints are handled one
coordinate at a time, cycling until every constraint holds.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .domain import ValidationError, reward_vector

log = logging.getLogger(__name__)

TIGHT_TOL = 1e-9
QUAD_TOL = 1e-12


class UndefinedCorrelation(ArithmeticError):
    """One side of the correlation has zero variance."""


class NoExplorationData(RuntimeError):
    """The buffer holds no exploration-promoted impressions."""


@dataclass(frozen=True, eq=False)
class WeightVector:
    w: np.ndarray

    def __post_init__(self) -> None:
        arr = reward_vector(self.w)
        if arr[0] != 1.0:
            raise ValidationError("first weight is pinned to 1")
        arr.flags.writeable = False
        object.__setattr__(self, "w", arr)

    @classmethod
    def initial(cls, m: int) -> WeightVector:
        w = np.zeros(m)
        w[0] = 1.0
        return cls(w)

    @property
    def m(self) -> int:
        return self.w.size

    def with_component(self, i: int, value: float) -> WeightVector:
        if i == 0:
            raise ValidationError("first weight is pinned to 1")
        w = self.w.copy()
        w[i] = value
        return WeightVector(w)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightVector):
            return NotImplemented
        return np.array_equal(self.w, other.w)

    def __repr__(self) -> str:
        return f"WeightVector({self.w.tolist()})"


@dataclass(frozen=True)
class ConstraintTargets:
    """Correlation floors for objectives 2..m, in objective order."""

    alpha: tuple[float, ...]

    def __post_init__(self) -> None:
        alpha = tuple(float(a) for a in self.alpha)
        for a in alpha:
            if not -1.0 < a < 1.0:
                raise ValidationError(f"correlation target {a} outside (-1, 1)")
        object.__setattr__(self, "alpha", alpha)


@dataclass(frozen=True, eq=False)
class EvalRecord:
    user_features: np.ndarray
    item_features: np.ndarray
    lift: np.ndarray
    reward: np.ndarray


@dataclass(frozen=True, eq=False)
class EvalSet:
    """Column-wise collection of EvalRecords (one row per promoted impression)."""

    user_features: np.ndarray
    item_features: np.ndarray
    lift: np.ndarray
    rewards: np.ndarray

    def __post_init__(self) -> None:
        if self.lift.shape != self.rewards.shape or self.lift.ndim != 2:
            raise ValidationError("lift and rewards must both be (N, m)")

    def __len__(self) -> int:
        return self.lift.shape[0]

    def __getitem__(self, k: int) -> EvalRecord:
        return EvalRecord(self.user_features[k], self.item_features[k],
                          self.lift[k], self.rewards[k])

    @property
    def m(self) -> int:
        return self.lift.shape[1]

    @classmethod
    def from_arrays(cls, lift, rewards) -> EvalSet:
        lift = np.asarray(lift, dtype=np.float64)
        rewards = np.asarray(rewards, dtype=np.float64)
        if lift.ndim == 1:
            lift, rewards = lift[:, None], rewards[:, None]
        empty = np.zeros((lift.shape[0], 0))
        return cls(empty, empty, lift, rewards)

    @classmethod
    def from_records(cls, records: Sequence[EvalRecord]) -> EvalSet:
        return cls(np.array([r.user_features for r in records]),
                   np.array([r.item_features for r in records]),
                   np.array([r.lift for r in records], dtype=np.float64),
                   np.array([r.reward for r in records], dtype=np.float64))


def build_eval_set(buffer: Iterable, params) -> EvalSet:
    """Collect every exploration-promoted impression with the current lift predictions.

    ``r_v`` is the step's reward vector when the promoted item (always shown at
    the top) was clicked and zero otherwise.
    """
    from .models import predict_lift

    users, items, rewards = [], [], []
    for tr in buffer:
        rows = np.flatnonzero(tr.promoted >= 0)
        if rows.size == 0:
            continue
        users.append(tr.user_features[rows])
        items.append(tr.item_features[rows, tr.promoted[rows]])
        clicked = (tr.click_pos[rows] == 1)[:, None]
        rewards.append(np.where(clicked, tr.rewards[rows], 0.0))
    if not users:
        raise NoExplorationData("no exploration-promoted impressions in the buffer")
    users = np.concatenate(users)
    items = np.concatenate(items)
    lift = predict_lift(params, users, items)
    return EvalSet(users, items, lift, np.concatenate(rewards))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 2:
        raise UndefinedCorrelation("need at least two records")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = xc @ xc
    syy = yc @ yc
    if sxx == 0.0 or syy == 0.0 or np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise UndefinedCorrelation("zero variance")
    return float((xc @ yc) / np.sqrt(sxx * syy))


def offline_corr(records: EvalSet, w, objective: int) -> float:
    """Pearson correlation of observed reward ``objective`` (0-based) with <lift, w>."""
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    return _pearson(records.rewards[:, objective], records.lift @ w)


def all_correlations(records: EvalSet, w) -> np.ndarray:
    out = np.full(records.m, np.nan)
    for i in range(records.m):
        try:
            out[i] = offline_corr(records, w, i)
        except UndefinedCorrelation:
            pass
    return out


# --------------------------------------------------------------------------
# one constraint in closed form
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SingleSolve:
    weight: float | None
    feasible: bool
    candidates: tuple[float, ...] = ()
    reason: str = ""


def quadratic_roots(a: float, b: float, c: float) -> tuple[float, ...]:
    """Real roots of a*x**2 + b*x + c (linear fallback when |a| < 1e-12)."""
    if abs(a) < QUAD_TOL:
        if b == 0.0:
            return ()
        return (-c / b,)
    disc = b * b - 4.0 * a * c
    if disc < -QUAD_TOL:
        return ()
    sq = np.sqrt(max(disc, 0.0))
    # numerically stable pair
    q = -0.5 * (b + np.copysign(sq, b))
    if q == 0.0:
        return (0.0,)
    return tuple(sorted({q / a, c / q}))


def solve_single(base: np.ndarray, lift_i: np.ndarray, reward_i: np.ndarray,
                 alpha: float) -> SingleSolve:
    """Smallest |x| with corr(reward_i, base + x * lift_i) >= alpha.

    Works on standardized variables, so the result rescales exactly with
    ``lift_i`` and the leading-coefficient tolerance is scale free.
    """
    try:
        if _pearson(base, reward_i) >= alpha:
            return SingleSolve(0.0, True, (0.0,))
    except UndefinedCorrelation:
        pass
    sa, sb, sy = base.std(), lift_i.std(), reward_i.std()
    if sa == 0.0 or sb == 0.0 or sy == 0.0:
        return SingleSolve(None, False, reason="zero variance")
    r_ay = _pearson(base, reward_i)
    r_by = _pearson(lift_i, reward_i)
    try:
        r_ab = _pearson(base, lift_i)
    except UndefinedCorrelation:
        r_ab = 0.0
    a2 = alpha * alpha
    roots = quadratic_roots(r_by * r_by - a2,
                            2.0 * (r_ay * r_by - a2 * r_ab),
                            r_ay * r_ay - a2)
    scale = sa / sb
    feasible = []
    for z in roots:
        # squaring admits roots of corr = -alpha; keep only true solutions
        if (r_ay + z * r_by) * alpha < 0.0:
            continue
        x = z * scale
        try:
            achieved = _pearson(reward_i, base + x * lift_i)
        except UndefinedCorrelation:
            continue
        if abs(achieved - alpha) <= TIGHT_TOL:
            feasible.append(x)
    if not feasible:
        return SingleSolve(None, False, roots, reason="no tight root")
    best = min(feasible, key=lambda x: (abs(x), x))
    return SingleSolve(best, True, tuple(feasible))


# --------------------------------------------------------------------------
# full solver
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SolveResult:
    weights: WeightVector
    correlations: np.ndarray
    feasible: tuple[bool, ...]
    passes: int = 0
    notes: tuple[str, ...] = field(default=())

    @property
    def all_feasible(self) -> bool:
        return all(self.feasible)


def problem_objective(records: EvalSet, w) -> float:
    """Mean over records of sum_{i>=2} (lift_i * w_i)**2."""
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    sec = records.lift[:, 1:] * w[1:]
    return float(np.mean(np.sum(sec * sec, axis=1)))


def _satisfied(records: EvalSet, w: np.ndarray, targets: ConstraintTargets) -> list[bool]:
    out = []
    for i, a in enumerate(targets.alpha, start=1):
        try:
            out.append(offline_corr(records, w, i) >= a - TIGHT_TOL)
        except UndefinedCorrelation:
            out.append(False)
    return out


def solve_weights(records: EvalSet, targets: ConstraintTargets, prev_w: WeightVector,
                  method: str = "sequential", order: Sequence[int] | None = None,
                  max_passes: int = 50, grid_range: float = 10.0,
                  grid_step: float = 0.01) -> SolveResult:
    """Pick secondary weights meeting the correlation floors with minimal secondary mass.

    With one secondary objective this is the closed form. With more, each
    weight is re-solved in ``order`` (default: objective index order) holding
    the others fixed, cycling until all constraints hold or ``max_passes`` is
    reached. ``method="grid"`` runs an exhaustive grid instead. A constraint
    that cannot be met keeps its previous weight and is flagged infeasible.
    """
    m = records.m
    if prev_w.m != m or len(targets.alpha) != m - 1:
        raise ValidationError("weight, target and record dimensions disagree")
    if m == 1:
        return SolveResult(prev_w, all_correlations(records, prev_w), ())
    if method == "grid":
        return _solve_grid(records, targets, prev_w, grid_range, grid_step)
    if method != "sequential":
        raise ValidationError(f"unknown solver method {method!r}")

    order = list(order) if order is not None else list(range(1, m))
    w = np.array(prev_w.w, dtype=np.float64)
    notes = []
    passes = 0
    stuck = set()
    for passes in range(1, max_passes + 1):
        changed = False
        for i in order:
            base = records.lift @ np.where(np.arange(m) == i, 0.0, w)
            res = solve_single(base, records.lift[:, i], records.rewards[:, i],
                               targets.alpha[i - 1])
            if res.feasible:
                stuck.discard(i)
                if res.weight != w[i]:
                    changed = True
                    w[i] = res.weight
            else:
                stuck.add(i)
        if not changed or all(_satisfied(records, w, targets)):
            break
    ok = _satisfied(records, w, targets)
    for i in sorted(stuck):
        notes.append(f"objective {i + 1}: infeasible, weight kept at {w[i]!r}")
        log.info("constraint on objective %d infeasible; keeping previous weight", i + 1)
    return SolveResult(WeightVector(w), all_correlations(records, w), tuple(ok), passes,
                       tuple(notes))


def _solve_grid(records: EvalSet, targets: ConstraintTargets, prev_w: WeightVector,
                grid_range: float, grid_step: float) -> SolveResult:
    m = records.m
    axis = np.arange(-grid_range, grid_range + grid_step / 2, grid_step)
    best, best_obj = None, np.inf
    for combo in itertools.product(axis, repeat=m - 1):
        w = np.concatenate(([1.0], combo))
        if all(_satisfied(records, w, targets)):
            obj = problem_objective(records, w)
            if obj < best_obj:
                best, best_obj = w, obj
    if best is None:
        return SolveResult(prev_w, all_correlations(records, prev_w),
                           tuple(_satisfied(records, prev_w.w, targets)),
                           notes=("grid: no feasible point",))
    return SolveResult(WeightVector(best), all_correlations(records, best),
                       tuple(_satisfied(records, best, targets)))
