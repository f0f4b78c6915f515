"""Synthetic users for slate experiments.

Each user has a latent vector that drifts toward the items they click. At
every step a candidate set of ``n`` items is drawn uniformly, the policy
orders it, and the user walks the slate under the cascade model with true
click/abandon probabilities from a softmax over {click, abandon, continue}
logits. A click pays a reward vector that depends on (user, item); an
abandonment pays an "offsite" reward that depends only on the user (value the
platform collects elsewhere after the user leaves this surface). The session
then continues with probability ``session_continue_prob`` up to ``horizon``.

Future rewards depend on the clicked item only, never on the unclicked
slate-mates, so R_clk(u, v) and R_abd(u) are well defined in this world.

Rollouts are simulated in lockstep batches; one generator drives a whole
batch, so results are reproducible for a fixed (seed, batch size).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Protocol

import numpy as np

from .cascade import sample_interactions
from .domain import Permutation, Trajectory, UserState, ValidationError
from .ranker import SlateBeliefs


class BudgetExceeded(RuntimeError):
    """A ground-truth estimate would need more simulated steps than allowed."""


@dataclass(frozen=True)
class WorldConfig:
    num_users: int = 20
    num_items: int = 50
    feature_dim: int = 4
    n: int = 5
    m: int = 1
    gamma: float = 0.9
    session_continue_prob: float = 0.8
    offsite_value_scale: float = 1.0
    horizon: int = 20
    seed: int = 0
    # latent drift toward a clicked item
    mixing_rate: float = 0.1
    # click/abandon logits; continue logit is 0
    click_bias: float = -1.0
    click_scale: float = 1.5
    click_item_spread: float = 0.5
    abandon_bias: float = -1.5
    abandon_item_spread: float = 1.0
    abandon_user_scale: float = 0.5
    # click reward: base + scale * tanh(u' M_k v + item bias_k)
    reward_base: float = 1.0
    reward_scale: float = 1.0
    reward_noise: float = 0.5
    # correlation of secondary reward structure with the primary one
    secondary_alignment: float = 0.0
    # item-level shift inside the tanh; clickbait in [-1, 1] is its correlation
    # with minus the item click bias (appealing items are worth less when > 0)
    item_reward_spread: float = 0.0
    clickbait: float = 0.0
    # extra abandon logit per unit of standardized item click bias
    abandon_click_coupling: float = 0.0
    # offsite reward: scale * softplus(u . h_k + offsite_bias)
    offsite_bias: float = 0.0
    offsite_noise: float = 0.2

    def __post_init__(self) -> None:
        if self.feature_dim < 1:
            raise ValidationError("feature_dim must be positive")
        if self.num_users < 1 or self.num_items < 1 or self.m < 1 or self.horizon < 1:
            raise ValidationError("num_users, num_items, m and horizon must be positive")
        if not 1 <= self.n <= self.num_items:
            raise ValidationError("slate size n must lie in 1..num_items")
        if not 0.0 < self.gamma < 1.0:
            raise ValidationError("gamma must lie in (0, 1)")
        if not 0.0 <= self.session_continue_prob < 1.0:
            raise ValidationError("session_continue_prob must lie in [0, 1)")
        if not -1.0 <= self.clickbait <= 1.0:
            raise ValidationError("clickbait must lie in [-1, 1]")
        if self.item_reward_spread < 0:
            raise ValidationError("item_reward_spread must be nonnegative")
        if self.offsite_value_scale < 0:
            raise ValidationError("offsite_value_scale must be non-negative")
        if not 0.0 <= self.mixing_rate <= 1.0:
            raise ValidationError("mixing_rate must lie in [0, 1]")
        if self.reward_noise < 0 or self.offsite_noise < 0:
            raise ValidationError("noise levels must be non-negative")
        if not -1.0 <= self.secondary_alignment <= 1.0:
            raise ValidationError("secondary_alignment must lie in [-1, 1]")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _softmax3(z_clk: np.ndarray, z_abd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = np.stack([z_clk, z_abd, np.zeros_like(z_clk)], axis=-1)
    mx = z.max(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        e = np.exp(z - mx)
    e = np.where(np.isposinf(mx), (z == mx).astype(np.float64), e)
    p = e / e.sum(axis=-1, keepdims=True)
    return p[..., 0], p[..., 1]


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    cfg: WorldConfig
    user_latent: np.ndarray      # (U, d) initial latent per user
    item_latent: np.ndarray      # (I, d)
    item_click_bias: np.ndarray  # (I,)
    item_abandon_bias: np.ndarray
    abandon_dir: np.ndarray      # (d,)
    reward_mats: np.ndarray      # (m, d, d)
    offsite_dir: np.ndarray      # (d, m)
    item_reward_bias: np.ndarray  # (I, m)

    # -- true model -------------------------------------------------------

    def probs(self, users: np.ndarray, items: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """True (p_clk, p_abd) for latents (B, d) and item indices (B, n)."""
        c = self.cfg
        v = self.item_latent[items]
        aff = np.einsum("bd,bnd->bn", users, v)
        z_clk = c.click_bias + c.click_scale * aff + self.item_click_bias[items]
        z_abd = (c.abandon_bias + self.item_abandon_bias[items]
                 + c.abandon_user_scale * (users @ self.abandon_dir)[:, None])
        return _softmax3(z_clk, z_abd)

    def click_reward_mean(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """(B, d) latents and (B,) item indices -> (B, m) expected click reward."""
        v = self.item_latent[items]
        inner = np.einsum("bd,kde,be->bk", users, self.reward_mats, v)
        inner = inner + self.item_reward_bias[items]
        return self.cfg.reward_base + self.cfg.reward_scale * np.tanh(inner)

    def offsite_mean(self, users: np.ndarray) -> np.ndarray:
        c = self.cfg
        if c.offsite_value_scale == 0.0:
            return np.zeros((len(users), c.m))
        return c.offsite_value_scale * _softplus(users @ self.offsite_dir + c.offsite_bias)

    def next_latent(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        eta = self.cfg.mixing_rate
        return (1.0 - eta) * users + eta * self.item_latent[items]

    def user_state(self, user_id: int, item_ids, latent: np.ndarray | None = None) -> UserState:
        latent = self.user_latent[user_id] if latent is None else latent
        item_ids = np.asarray(item_ids, dtype=np.int64)
        return UserState(user_id, latent, item_ids, self.item_latent[item_ids])


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x)


def _orth(x: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Unit vector along the part of ``x`` orthogonal to unit ``ref``."""
    return _unit(x - (x @ ref) * ref)


def init_world(cfg: WorldConfig) -> GroundTruth:
    """Draw latents and true-model parameters from ``cfg.seed``.

    Item-level biases are linear in the item latent, so a model that sees
    item features can learn them.
    """
    rng = np.random.default_rng(cfg.seed)
    d, m = cfg.feature_dim, cfg.m
    scale = d ** -0.25  # latent dot products have unit variance
    users = rng.standard_normal((cfg.num_users, d)) * scale
    items = rng.standard_normal((cfg.num_items, d)) * scale
    abandon_dir = rng.standard_normal(d) / math.sqrt(d)
    mats = np.empty((m, d, d))
    mats[0] = np.eye(d)
    a = cfg.secondary_alignment
    for k in range(1, m):
        mats[k] = a * np.eye(d) + math.sqrt(1.0 - a * a) * rng.standard_normal((d, d)) / math.sqrt(d)
    offsite_dir = rng.standard_normal((d, m)) / math.sqrt(d)

    # unit-variance item scores along random directions of the item latent
    dirs = rng.standard_normal((2 + m, d))
    dir_click = _unit(dirs[0])
    z_click = items @ dir_click / scale
    z_abd = items @ _unit(dirs[1]) / scale
    click_bias = cfg.click_item_spread * z_click
    abandon_bias = cfg.abandon_item_spread * z_abd + cfg.abandon_click_coupling * z_click
    reward_bias = np.empty((cfg.num_items, m))
    dir_reward = _unit(dirs[2])
    if d > 1:
        cb = cfg.clickbait
        dir_reward = -cb * dir_click + math.sqrt(1.0 - cb * cb) * _orth(dirs[2], dir_click)
    for k in range(m):
        g = dir_reward
        if k > 0 and d > 1:
            g = a * dir_reward + math.sqrt(1.0 - a * a) * _orth(dirs[2 + k], dir_reward)
        reward_bias[:, k] = cfg.item_reward_spread * (items @ g) / scale
    return GroundTruth(cfg, users, items, click_bias, abandon_bias, abandon_dir, mats, offsite_dir,
                       reward_bias)


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------

class Policy(Protocol):
    def act(self, user_ids: np.ndarray, users: np.ndarray, item_ids: np.ndarray,
            items: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Return (orders (B, n), promoted (B,) with -1 for none)."""


class RandomPolicy:
    """Uniformly random display order."""

    def act(self, user_ids, users, item_ids, items, rng):
        B, n = item_ids.shape
        return np.argsort(rng.random((B, n)), axis=1), np.full(B, -1)


class CallablePolicy:
    """Adapter for a plain ``UserState -> Permutation`` function."""

    def __init__(self, fn: Callable[[UserState], Permutation]):
        self.fn = fn

    def act(self, user_ids, users, item_ids, items, rng):
        orders = np.empty(item_ids.shape, dtype=np.int64)
        promoted = np.full(len(item_ids), -1)
        for b in range(len(item_ids)):
            perm = self.fn(UserState(int(user_ids[b]), users[b], item_ids[b], items[b]))
            orders[b] = perm.order
            if perm.promoted is not None:
                promoted[b] = perm.promoted
        return orders, promoted


def as_policy(policy) -> Policy:
    return policy if hasattr(policy, "act") else CallablePolicy(policy)


# --------------------------------------------------------------------------
# lockstep engine
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StepBlock:
    """One time step for the still-active rows of a batch."""

    t: int
    rows: np.ndarray
    user_ids: np.ndarray
    users: np.ndarray
    item_ids: np.ndarray
    orders: np.ndarray
    promoted: np.ndarray
    click_pos: np.ndarray
    rewards: np.ndarray


def _sample_candidates(rng: np.random.Generator, count: int, num_items: int, n: int) -> np.ndarray:
    keys = rng.random((count, num_items))
    if n == num_items:
        return np.argsort(keys, axis=1)
    part = np.argpartition(keys, n - 1, axis=1)[:, :n]
    sub = np.take_along_axis(keys, part, axis=1)
    return np.take_along_axis(part, np.argsort(sub, axis=1), axis=1)


def simulate(gt: GroundTruth, policy, num: int, horizon: int, rng: np.random.Generator,
             *, marginalize: bool = False, user_ids: np.ndarray | None = None,
             start_latent: np.ndarray | None = None):
    """Run ``num`` sessions in lockstep, yielding a StepBlock per time step.

    With ``marginalize`` every session runs to ``horizon`` and termination is
    left to the caller (weight step t by continue_prob**t); otherwise each
    session stops with probability 1 - continue_prob after every step.
    """
    c = gt.cfg
    policy = as_policy(policy)
    if user_ids is None:
        user_ids = rng.integers(c.num_users, size=num)
    user_ids = np.asarray(user_ids, dtype=np.int64)
    latent = gt.user_latent[user_ids].copy() if start_latent is None else np.array(start_latent, dtype=np.float64)
    rows = np.arange(num)
    for t in range(horizon):
        L = rows.size
        if L == 0:
            return
        cand = _sample_candidates(rng, L, c.num_items, c.n)
        u = latent[rows]
        orders, promoted = policy.act(user_ids[rows], u, cand, gt.item_latent[cand], rng)
        shown = np.take_along_axis(cand, orders, axis=1)
        p_clk, p_abd = gt.probs(u, shown)
        click_pos = sample_interactions(p_clk, p_abd, rng)
        noise = rng.standard_normal((L, c.m))
        clicked = click_pos > 0
        clicked_item = shown[np.arange(L), np.maximum(click_pos - 1, 0)]
        reward = np.where(clicked[:, None],
                          gt.click_reward_mean(u, clicked_item) + c.reward_noise * noise,
                          gt.offsite_mean(u) + c.offsite_noise * noise * (c.offsite_value_scale > 0))
        yield StepBlock(t, rows, user_ids[rows], u, cand, orders, promoted, click_pos, reward)
        if clicked.any():
            moved = rows[clicked]
            latent[moved] = gt.next_latent(latent[moved], clicked_item[clicked])
        if not marginalize:
            keep = rng.random(L) < c.session_continue_prob
            rows = rows[keep]


def rollout_batch(gt: GroundTruth, policy, num: int, horizon: int, rng: np.random.Generator,
                  first_id: int = 0) -> list[Trajectory]:
    """Sample ``num`` trajectories; ids run from ``first_id``."""
    blocks = list(simulate(gt, policy, num, horizon, rng))
    cols = {k: np.concatenate([getattr(b, k) for b in blocks])
            for k in ("rows", "user_ids", "users", "item_ids", "orders", "promoted",
                      "click_pos", "rewards")}
    by_row = np.argsort(cols["rows"], kind="stable")  # blocks are already time-ordered
    for k in cols:
        cols[k] = cols[k][by_row]
    bounds = np.searchsorted(cols["rows"], np.arange(num + 1))
    item_feats = gt.item_latent[cols["item_ids"]]
    out = []
    for r in range(num):
        s, e = bounds[r], bounds[r + 1]
        out.append(Trajectory(cols["user_ids"][s:e], cols["users"][s:e], cols["item_ids"][s:e],
                              item_feats[s:e], cols["orders"][s:e], cols["promoted"][s:e],
                              cols["click_pos"][s:e], cols["rewards"][s:e], first_id + r))
    return out


def rollout(gt: GroundTruth, policy, horizon: int, rng: np.random.Generator) -> Trajectory:
    if horizon < 1:
        raise ValidationError("horizon must be at least 1")
    return rollout_batch(gt, policy, 1, horizon, rng)[0]


@dataclass(frozen=True, eq=False)
class ReturnSamples:
    platform: np.ndarray  # (num, m)
    surface: np.ndarray   # (num, m) click-sourced part only


def sample_returns(gt: GroundTruth, policy, num: int, horizon: int, rng: np.random.Generator,
                   *, marginalize: bool = True, user_ids=None, start_latent=None) -> ReturnSamples:
    """Discounted per-session returns without materializing trajectories.

    With ``marginalize`` the session-continuation coin is integrated out
    (step t weighted by (gamma * continue_prob)**t), which leaves the
    expectation unchanged and removes that source of variance.
    """
    c = gt.cfg
    platform = np.zeros((num, c.m))
    surface = np.zeros((num, c.m))
    step_w = c.gamma * (c.session_continue_prob if marginalize else 1.0)
    for blk in simulate(gt, policy, num, horizon, rng, marginalize=marginalize,
                        user_ids=user_ids, start_latent=start_latent):
        disc = step_w ** blk.t
        platform[blk.rows] += disc * blk.rewards
        surface[blk.rows] += disc * blk.rewards * (blk.click_pos > 0)[:, None]
    return ReturnSamples(platform, surface)


# --------------------------------------------------------------------------
# ground-truth values
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrueBeliefs:
    beliefs: SlateBeliefs
    r_clk: np.ndarray   # (n, m)
    se_clk: np.ndarray  # (n, m)
    se_abd: np.ndarray  # (m,)
    se_lift: np.ndarray  # (n, m)


def _continuation(gt, policy, latents, user_ids, horizon, num_rollouts, rng):
    """Mean and standard error of the value of continuing from each latent."""
    k = len(latents)
    if horizon <= 0 or gt.cfg.session_continue_prob == 0.0:
        return np.zeros((k, gt.cfg.m)), np.zeros((k, gt.cfg.m))
    starts = np.repeat(latents, num_rollouts, axis=0)
    ids = np.repeat(user_ids, num_rollouts)
    samples = sample_returns(gt, policy, k * num_rollouts, horizon, rng,
                             user_ids=ids, start_latent=starts).platform
    samples = samples.reshape(k, num_rollouts, -1)
    mean = samples.mean(axis=1)
    se = samples.std(axis=1, ddof=1) / math.sqrt(num_rollouts) if num_rollouts > 1 \
        else np.full_like(mean, np.inf)
    return mean, se


def true_slate_beliefs(gt: GroundTruth, state: UserState, policy, eval_horizon: int,
                       rng: np.random.Generator, num_rollouts: int = 1000,
                       max_steps: int = 20_000_000) -> TrueBeliefs:
    """Monte Carlo R_abd(u) and R_clk(u, v) for ``policy``, with standard errors.

    The first outcome is forced (abandon, or a click on each candidate); its
    immediate reward enters at its exact mean and the continuation is
    estimated by rollouts of ``eval_horizon - 1`` further steps.
    """
    c = gt.cfg
    n = state.n
    if (n + 1) * num_rollouts * eval_horizon > max_steps:
        raise BudgetExceeded(f"{(n + 1) * num_rollouts * eval_horizon} steps exceeds {max_steps}")
    u = np.asarray(state.user_features, dtype=np.float64)[None, :]
    items = np.asarray(state.item_ids, dtype=np.int64)
    p_clk, p_abd = gt.probs(u, items[None, :])
    factor = c.gamma * c.session_continue_prob

    starts = np.vstack([u, gt.next_latent(np.repeat(u, n, axis=0), items)])
    ids = np.full(n + 1, state.user_id)
    cont, cont_se = _continuation(gt, policy, starts, ids, eval_horizon - 1, num_rollouts, rng)

    r_abd = gt.offsite_mean(u)[0] + factor * cont[0]
    r_clk = gt.click_reward_mean(np.repeat(u, n, axis=0), items) + factor * cont[1:]
    se_abd = factor * cont_se[0]
    se_clk = factor * cont_se[1:]
    se_lift = np.sqrt(se_clk ** 2 + se_abd[None, :] ** 2)
    beliefs = SlateBeliefs(p_clk[0], p_abd[0], r_clk - r_abd[None, :], r_abd)
    return TrueBeliefs(beliefs, r_clk, se_clk, se_abd, se_lift)
