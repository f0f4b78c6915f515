"""Core value types: user states, permutation actions, steps and trajectories.

Conventions used throughout the package:

* A reward vector is a 1-D float64 array of length ``m``; component 0 is the
  primary objective.
* ``Permutation.order`` is 0-based: ``order[i]`` is the candidate index shown at
  display position ``i + 1``.
* Click positions are 1-based display ranks, with 0 meaning the user abandoned
  the slate.

Trajectories are stored column-wise (one array per field, one row per step)
because the trainer and simulator touch hundreds of thousands of steps; the
``steps`` property materializes ``Step`` objects on demand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from . import _kernels

RewardVector = np.ndarray


class ValidationError(ValueError):
    """Input violates a documented invariant."""


class ContractViolation(ValueError):
    """Caller broke an operation's precondition."""


def reward_vector(values, m: int | None = None) -> RewardVector:
    arr = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError("reward vector must be a non-empty 1-D sequence")
    if m is not None and arr.size != m:
        raise ValidationError(f"reward vector has {arr.size} components, expected {m}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("reward vector components must be finite")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DiscountConfig:
    gamma: float

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValidationError(f"gamma must lie in (0, 1), got {self.gamma}")


@dataclass(frozen=True)
class CandidateItem:
    item_id: int
    item_features: np.ndarray


@dataclass(frozen=True, eq=False)
class UserState:
    """A user together with the ``n`` candidates nominated for this slate."""

    user_id: int
    user_features: np.ndarray
    item_ids: np.ndarray
    item_features: np.ndarray

    def __post_init__(self) -> None:
        ids = np.asarray(self.item_ids, dtype=np.int64)
        feats = np.asarray(self.item_features, dtype=np.float64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValidationError("a user state needs at least one candidate")
        if np.unique(ids).size != ids.size:
            raise ValidationError("duplicate item ids in candidate set")
        if feats.ndim != 2 or feats.shape[0] != ids.size:
            raise ValidationError("item_features must have one row per candidate")
        object.__setattr__(self, "item_ids", _frozen(ids))
        object.__setattr__(self, "item_features", _frozen(feats))
        object.__setattr__(self, "user_features",
                           _frozen(np.asarray(self.user_features, dtype=np.float64)))

    @classmethod
    def from_candidates(cls, user_id: int, user_features, candidates: Sequence[CandidateItem]):
        return cls(user_id, user_features,
                   [c.item_id for c in candidates],
                   np.array([c.item_features for c in candidates], dtype=np.float64))

    @property
    def n(self) -> int:
        return int(self.item_ids.size)

    @property
    def candidates(self) -> tuple[CandidateItem, ...]:
        return tuple(CandidateItem(int(i), f) for i, f in zip(self.item_ids, self.item_features))


@dataclass(frozen=True, eq=False)
class Permutation:
    """Display order of a slate plus the exploration-promoted candidate, if any."""

    order: np.ndarray
    promoted: int | None = None

    def __post_init__(self) -> None:
        order = np.asarray(self.order, dtype=np.int64)
        n = order.size
        if order.ndim != 1 or n == 0:
            raise ValidationError("permutation must be a non-empty 1-D index array")
        seen = np.zeros(n, dtype=bool)
        for idx in order:
            if idx < 0 or idx >= n:
                raise ValidationError(f"out of range index {idx + 1} for n={n}")
            if seen[idx]:
                raise ValidationError(f"duplicate index {idx + 1}")
            seen[idx] = True
        if self.promoted is not None and not 0 <= self.promoted < n:
            raise ValidationError(f"promoted candidate {self.promoted} out of range")
        object.__setattr__(self, "order", _frozen(order))

    @property
    def n(self) -> int:
        return int(self.order.size)

    def one_based(self) -> list[int]:
        return [int(i) + 1 for i in self.order]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Permutation):
            return NotImplemented
        return np.array_equal(self.order, other.order) and self.promoted == other.promoted

    def __hash__(self) -> int:
        return hash((tuple(self.order.tolist()), self.promoted))

    @classmethod
    def identity(cls, n: int) -> Permutation:
        return cls(np.arange(n))


def validate_permutation(order: Sequence[int], n: int | None = None) -> Permutation:
    """Build a Permutation from 1-based display indices, e.g. ``[2, 1, 3]``.

    Raises ValidationError naming the first duplicate or out-of-range index.
    """
    order = [int(i) for i in order]
    size = len(order) if n is None else n
    if len(order) != size:
        raise ValidationError(f"expected {size} indices, got {len(order)}")
    seen = set()
    for idx in order:
        if not 1 <= idx <= size:
            raise ValidationError(f"out of range index {idx} for n={size}")
        if idx in seen:
            raise ValidationError(f"duplicate index {idx}")
        seen.add(idx)
    return Permutation(np.array(order, dtype=np.int64) - 1)


@dataclass(frozen=True, eq=False)
class Step:
    state: UserState
    action: Permutation
    click_pos: int
    reward: RewardVector

    def __post_init__(self) -> None:
        if self.action.n != self.state.n:
            raise ValidationError("permutation size does not match candidate count")
        if not 0 <= self.click_pos <= self.state.n:
            raise ValidationError(f"click position {self.click_pos} outside 0..{self.state.n}")
        object.__setattr__(self, "reward", _frozen(reward_vector(self.reward)))

    @property
    def clicked_item(self) -> int | None:
        """Candidate index that was clicked, or None on abandonment."""
        if self.click_pos == 0:
            return None
        return int(self.action.order[self.click_pos - 1])


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One user session, stored column-wise with one row per step.

    ``orders`` holds 0-based display orders and ``promoted`` holds the
    exploration-promoted candidate index per step (-1 if none).
    """

    user_ids: np.ndarray
    user_features: np.ndarray
    item_ids: np.ndarray
    item_features: np.ndarray
    orders: np.ndarray
    promoted: np.ndarray
    click_pos: np.ndarray
    rewards: np.ndarray
    trajectory_id: int = 0

    def __post_init__(self) -> None:
        length = len(self.click_pos)
        if length == 0:
            raise ValidationError("trajectory must contain at least one step")
        for name in ("user_ids", "user_features", "item_ids", "item_features",
                     "orders", "promoted", "rewards"):
            if len(getattr(self, name)) != length:
                raise ValidationError(f"trajectory column {name} has wrong length")
        if not np.all(np.isfinite(self.rewards)):
            raise ValidationError("reward vector components must be finite")

    def __len__(self) -> int:
        return len(self.click_pos)

    @property
    def m(self) -> int:
        return self.rewards.shape[1]

    @property
    def n(self) -> int:
        return self.orders.shape[1]

    @classmethod
    def from_steps(cls, steps: Sequence[Step], trajectory_id: int = 0) -> Trajectory:
        if not steps:
            raise ValidationError("trajectory must contain at least one step")
        return cls(
            user_ids=np.array([s.state.user_id for s in steps], dtype=np.int64),
            user_features=np.array([s.state.user_features for s in steps]),
            item_ids=np.array([s.state.item_ids for s in steps]),
            item_features=np.array([s.state.item_features for s in steps]),
            orders=np.array([s.action.order for s in steps]),
            promoted=np.array([-1 if s.action.promoted is None else s.action.promoted
                               for s in steps], dtype=np.int64),
            click_pos=np.array([s.click_pos for s in steps], dtype=np.int64),
            rewards=np.array([s.reward for s in steps], dtype=np.float64),
            trajectory_id=trajectory_id,
        )

    def step(self, t: int) -> Step:
        promoted = int(self.promoted[t])
        state = UserState(int(self.user_ids[t]), self.user_features[t],
                          self.item_ids[t], self.item_features[t])
        action = Permutation(self.orders[t], None if promoted < 0 else promoted)
        return Step(state, action, int(self.click_pos[t]), self.rewards[t])

    @property
    def steps(self) -> tuple[Step, ...]:
        return tuple(self.step(t) for t in range(len(self)))

    def displayed_item_features(self) -> np.ndarray:
        """(T, n, d) item features in display order."""
        rows = np.arange(len(self))[:, None]
        return self.item_features[rows, self.orders]

    def returns(self, gamma: float) -> np.ndarray:
        """Discounted return from every step, shape (T, m)."""
        return _kernels.discounted_returns(self.rewards, np.array([len(self)]), float(gamma))


def discounted_return(traj: Trajectory, t: int, cfg: DiscountConfig) -> RewardVector:
    """Sum over t' >= t of gamma**(t'-t) * reward(t'), computed back to front."""
    if not 0 <= t < len(traj):
        raise ContractViolation(f"step index {t} outside 0..{len(traj) - 1}")
    return traj.returns(cfg.gamma)[t]


def concat_returns(trajectories: Sequence[Trajectory], gamma: float) -> np.ndarray:
    """Discounted returns for every step of every trajectory, concatenated."""
    rewards = np.concatenate([tr.rewards for tr in trajectories])
    ends = np.cumsum([len(tr) for tr in trajectories]).astype(np.int64)
    return _kernels.discounted_returns(rewards, ends, float(gamma))


# --------------------------------------------------------------------------
# line-delimited trajectory log
# --------------------------------------------------------------------------

LOG_FIELDS = ("trajectory_id", "step_index", "user_id", "item_ids", "click_pos", "reward")


def iter_log_records(trajectories: Iterable[Trajectory]) -> Iterator[dict]:
    for tr in trajectories:
        for t in range(len(tr)):
            shown = tr.item_ids[t][tr.orders[t]]
            yield {
                "trajectory_id": int(tr.trajectory_id),
                "step_index": t,
                "user_id": int(tr.user_ids[t]),
                "item_ids": [int(i) for i in shown],
                "click_pos": int(tr.click_pos[t]),
                "reward": [float(r) for r in tr.rewards[t]],
            }


def write_trajectory_log(trajectories: Iterable[Trajectory], dest: str | Path | IO[str]) -> int:
    """Write one JSON object per step; returns the number of lines written."""
    count = 0
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8") as fh:
            return write_trajectory_log(trajectories, fh)
    for rec in iter_log_records(trajectories):
        dest.write(json.dumps(rec, separators=(",", ":")) + "\n")
        count += 1
    return count


def read_trajectory_log(src: str | Path | IO[str]) -> list[dict]:
    if isinstance(src, (str, Path)):
        with open(src, encoding="utf-8") as fh:
            return read_trajectory_log(fh)
    records = []
    for lineno, line in enumerate(src, start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        missing = [f for f in LOG_FIELDS if f not in rec]
        if missing:
            raise ValidationError(f"line {lineno}: missing fields {missing}")
        records.append(rec)
    return records
