"""Item scoring, slate ordering, exploration and exact slate value.

The serving score of an item is

    p_clk / (p_clk + p_abd) * <r_lift, w>

and sorting by it maximizes the expected slate value
``<r_abd, w> + sum_i P(click at i) * <r_lift(item at i), w>`` under the
cascade model. ``brute_force_best`` enumerates every ordering and is the
oracle used to check that claim; it is not meant for serving.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .cascade import SlateProbs, click_position_probs
from .domain import Permutation, ValidationError, reward_vector

SCORE_KINDS = ("cascade", "ctr", "ctr_descending")
MAX_BRUTE_FORCE_N = 8


def _as_weights(w) -> np.ndarray:
    # WeightVector or plain array
    return np.asarray(getattr(w, "w", w), dtype=np.float64)


@dataclass(frozen=True, eq=False)
class ItemBeliefs:
    p_clk: float
    p_abd: float
    r_lift: np.ndarray

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_clk <= 1.0 and 0.0 <= self.p_abd <= 1.0):
            raise ValidationError("probabilities must lie in [0, 1]")
        if self.p_clk + self.p_abd > 1.0 + 1e-12:
            raise ValidationError("p_clk + p_abd exceeds 1")
        object.__setattr__(self, "r_lift", reward_vector(self.r_lift))


@dataclass(frozen=True, eq=False)
class SlateBeliefs:
    """Beliefs for all ``n`` candidates, in candidate (not display) order."""

    p_clk: np.ndarray
    p_abd: np.ndarray
    r_lift: np.ndarray  # (n, m)
    r_abd: np.ndarray   # (m,)

    def __post_init__(self) -> None:
        c = np.asarray(self.p_clk, dtype=np.float64).ravel()
        d = np.asarray(self.p_abd, dtype=np.float64).ravel()
        lift = np.asarray(self.r_lift, dtype=np.float64)
        if lift.ndim == 1:
            lift = lift[:, None]
        abd = reward_vector(self.r_abd)
        SlateProbs(c, d)  # range and sum checks
        if lift.shape != (c.size, abd.size):
            raise ValidationError(f"r_lift must have shape ({c.size}, {abd.size})")
        if not np.all(np.isfinite(lift)):
            raise ValidationError("r_lift must be finite")
        object.__setattr__(self, "p_clk", c)
        object.__setattr__(self, "p_abd", d)
        object.__setattr__(self, "r_lift", lift)
        object.__setattr__(self, "r_abd", abd)

    @classmethod
    def from_items(cls, items, r_abd) -> SlateBeliefs:
        return cls([b.p_clk for b in items], [b.p_abd for b in items],
                   np.array([b.r_lift for b in items]), r_abd)

    @property
    def n(self) -> int:
        return self.p_clk.size

    @property
    def items(self) -> tuple[ItemBeliefs, ...]:
        return tuple(ItemBeliefs(float(c), float(d), l)
                     for c, d, l in zip(self.p_clk, self.p_abd, self.r_lift))


def score_items(p_clk: np.ndarray, p_abd: np.ndarray, lift: np.ndarray,
                kind: str = "cascade") -> np.ndarray:
    """Vectorized item scores from scalarized lifts.

    ``cascade`` is the ratio rule, ``ctr`` drops the abandonment term
    (p_clk * lift) and ``ctr_descending`` ignores value altogether.
    Items with p_clk + p_abd = 0 score 0 under ``cascade``.
    """
    if kind == "cascade":
        total = p_clk + p_abd
        ratio = np.divide(p_clk, total, out=np.zeros_like(total, dtype=np.float64),
                          where=total > 0)
        return ratio * lift
    if kind == "ctr":
        return p_clk * lift
    if kind == "ctr_descending":
        return np.array(p_clk, dtype=np.float64, copy=True)
    raise ValidationError(f"unknown score kind {kind!r}")


def item_score(b: ItemBeliefs, w) -> float:
    lift = float(b.r_lift @ _as_weights(w))
    return float(score_items(np.array([b.p_clk]), np.array([b.p_abd]), np.array([lift]))[0])


def slate_scores(sb: SlateBeliefs, w, kind: str = "cascade") -> np.ndarray:
    return score_items(sb.p_clk, sb.p_abd, sb.r_lift @ _as_weights(w), kind)


def order_by_scores(scores: np.ndarray) -> np.ndarray:
    """Descending sort along the last axis; ties keep ascending index order."""
    return np.argsort(-scores, axis=-1, kind="stable")


def rank_slate(sb: SlateBeliefs, w, kind: str = "cascade") -> Permutation:
    return Permutation(order_by_scores(slate_scores(sb, w, kind)))


def promote(order: np.ndarray, item: int) -> np.ndarray:
    """Move ``item`` to the front, keeping everyone else's relative order."""
    order = np.asarray(order)
    return np.concatenate(([item], order[order != item]))


def explore(perm: Permutation, epsilon: float, rng: np.random.Generator) -> Permutation:
    """With probability epsilon, promote one uniformly random candidate to the top."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValidationError("epsilon must lie in [0, 1]")
    hit = rng.random() < epsilon
    item = int(rng.integers(perm.n))
    if not hit:
        return perm
    return Permutation(promote(perm.order, item), promoted=item)


def explore_batch(orders: np.ndarray, epsilon: float,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`explore`. Returns (orders, promoted) with -1 for no promotion."""
    batch, n = orders.shape
    hit = rng.random(batch) < epsilon
    items = rng.integers(n, size=batch)
    promoted = np.where(hit, items, -1)
    if not hit.any():
        return orders, promoted
    out = orders.copy()
    rows = np.flatnonzero(hit)
    sub = orders[rows]
    keep = sub != items[rows, None]
    rest = sub[keep].reshape(len(rows), n - 1)
    out[rows, 0] = items[rows]
    out[rows, 1:] = rest
    return out, promoted


def slate_value(sb: SlateBeliefs, perm: Permutation, w) -> float:
    """Expected scalarized long-term value of showing the slate in ``perm`` order."""
    w = _as_weights(w)
    lift = sb.r_lift @ w
    order = perm.order
    probs = click_position_probs(SlateProbs(sb.p_clk[order], sb.p_abd[order]))
    return float(sb.r_abd @ w + probs[1:] @ lift[order])


def brute_force_best(sb: SlateBeliefs, w) -> tuple[Permutation, float]:
    """Exhaustive search over all n! orderings.

    Ties go to the lexicographically first permutation. Refuses n > 8.
    """
    if sb.n > MAX_BRUTE_FORCE_N:
        raise ValidationError(f"brute force refused for n={sb.n} > {MAX_BRUTE_FORCE_N}")
    w = _as_weights(w)
    perms = np.array(list(itertools.permutations(range(sb.n))), dtype=np.int64)
    lift = sb.r_lift @ w
    values = _kernels.slate_values(perms, sb.p_clk, sb.p_abd, lift)
    k = int(np.argmax(values))  # first maximum = lexicographic tie-break
    best = Permutation(perms[k])
    return best, slate_value(sb, best, w)


def num_permutations(n: int) -> int:
    return math.factorial(n)
