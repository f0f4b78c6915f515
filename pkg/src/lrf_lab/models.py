"""Small feed-forward approximators for the four per-user / per-item quantities.

Heads (each a tanh MLP, hand-written forward and backward passes):

``abd_reward``
    user features -> expected return after abandoning the slate (m values)
``lift_reward``
    (user, item) -> return after clicking the item minus the abandonment return
``prob``
    (user, item) -> softmax over {click, abandon, continue}; the first two
    outputs are p_clk and p_abd, so p_clk + p_abd <= 1 holds by construction

Variants: ``no_lift`` serves and trains with the abandonment value forced to
zero (the lift head then learns the raw click return), and ``two_model``
swaps ``lift_reward`` for a ``clk_reward`` head trained on raw returns, with
lift = clk_reward - abd_reward.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels
from .cascade import PROB_FLOOR, log_likelihood_batch
from .domain import ContractViolation, Step, Trajectory, UserState, ValidationError, concat_returns
from .ranker import SlateBeliefs

VARIANTS = ("lift", "no_lift", "two_model")
SNAPSHOT_FORMAT = "lrf-lab-snapshot/1"
HEAD_ORDER = ("abd_reward", "lift_reward", "clk_reward", "prob")

Layer = tuple[np.ndarray, np.ndarray]


class SnapshotMismatch(ValidationError):
    """Snapshot descriptor disagrees with the expected architecture."""


@dataclass(frozen=True)
class Architecture:
    user_dim: int
    item_dim: int
    m: int
    hidden: tuple[int, ...] = (32, 32)
    variant: str = "lift"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown model variant {self.variant!r}")
        if min(self.user_dim, self.item_dim, self.m) < 1 or any(h < 1 for h in self.hidden):
            raise ValidationError("architecture sizes must be positive")

    @property
    def value_head(self) -> str:
        return "clk_reward" if self.variant == "two_model" else "lift_reward"

    def layer_sizes(self) -> dict[str, list[int]]:
        pair = self.user_dim + self.item_dim
        return {
            "abd_reward": [self.user_dim, *self.hidden, self.m],
            self.value_head: [pair, *self.hidden, self.m],
            "prob": [pair, *self.hidden, 3],
        }

    def num_parameters(self) -> int:
        return sum(a * b + b for sizes in self.layer_sizes().values()
                   for a, b in zip(sizes[:-1], sizes[1:]))

    def descriptor(self) -> dict:
        return {"format": SNAPSHOT_FORMAT, "user_dim": self.user_dim,
                "item_dim": self.item_dim, "m": self.m, "hidden": list(self.hidden),
                "variant": self.variant}

    @classmethod
    def from_descriptor(cls, desc: Mapping) -> Architecture:
        if desc.get("format") != SNAPSHOT_FORMAT:
            raise SnapshotMismatch(f"unsupported snapshot format {desc.get('format')!r}")
        return cls(int(desc["user_dim"]), int(desc["item_dim"]), int(desc["m"]),
                   tuple(desc["hidden"]), str(desc["variant"]))


@dataclass(frozen=True, eq=False)
class ModelParams:
    arch: Architecture
    heads: Mapping[str, tuple[Layer, ...]]

    def __post_init__(self) -> None:
        sizes = self.arch.layer_sizes()
        if set(self.heads) != set(sizes):
            raise ValidationError(f"heads {sorted(self.heads)} do not match {sorted(sizes)}")
        for name, dims in sizes.items():
            layers = self.heads[name]
            if len(layers) != len(dims) - 1:
                raise ValidationError(f"head {name} has wrong depth")
            for (W, b), fan_in, fan_out in zip(layers, dims[:-1], dims[1:]):
                if W.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                    raise ValidationError(f"head {name} has wrong layer shape {W.shape}")

    def head_names(self) -> list[str]:
        return [h for h in HEAD_ORDER if h in self.heads]

    @property
    def num_parameters(self) -> int:
        return sum(W.size + b.size for layers in self.heads.values() for W, b in layers)

    def flat(self) -> np.ndarray:
        parts = []
        for name in self.head_names():
            for W, b in self.heads[name]:
                parts += [W.ravel(), b]
        return np.concatenate(parts)

    def with_flat(self, vec: np.ndarray) -> ModelParams:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_parameters:
            raise ValidationError("flat parameter vector has wrong length")
        heads, k = {}, 0
        for name in self.head_names():
            layers = []
            for W, b in self.heads[name]:
                W2 = vec[k:k + W.size].reshape(W.shape).copy()
                k += W.size
                b2 = vec[k:k + b.size].copy()
                k += b.size
                layers.append((W2, b2))
            heads[name] = tuple(layers)
        return ModelParams(self.arch, heads)


def init_params(arch: Architecture, seed: int) -> ModelParams:
    """Fan-in-scaled uniform hidden layers; output layers start at exactly zero."""
    rng = np.random.default_rng(seed)
    heads = {}
    sizes = arch.layer_sizes()
    for name in [h for h in HEAD_ORDER if h in sizes]:
        dims = sizes[name]
        layers = []
        for li, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            if li == len(dims) - 2:
                W = np.zeros((fan_in, fan_out))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            layers.append((W, np.zeros(fan_out)))
        heads[name] = tuple(layers)
    return ModelParams(arch, heads)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def _forward(layers: Sequence[Layer], x: np.ndarray):
    acts = [x]
    h = x
    for W, b in layers[:-1]:
        h = np.tanh(h @ W + b)
        acts.append(h)
    W, b = layers[-1]
    return h @ W + b, acts


def _backward(layers: Sequence[Layer], acts: list, dout: np.ndarray) -> list[Layer]:
    grads: list = [None] * len(layers)
    g = dout
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        a = acts[li]
        grads[li] = (a.T @ g, g.sum(axis=0))
        if li > 0:
            g = (g @ W.T) * (1.0 - a * a)
    return grads


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _pairs(users: np.ndarray, items: np.ndarray) -> np.ndarray:
    """(B, du) x (B, n, di) -> (B*n, du+di)."""
    B, n, _ = items.shape
    u = np.broadcast_to(users[:, None, :], (B, n, users.shape[1]))
    return np.concatenate([u, items], axis=2).reshape(B * n, -1)


def _check_dims(params: ModelParams, users: np.ndarray, items: np.ndarray) -> None:
    if users.shape[-1] != params.arch.user_dim or items.shape[-1] != params.arch.item_dim:
        raise ValidationError(
            f"feature lengths ({users.shape[-1]}, {items.shape[-1]}) do not match "
            f"architecture ({params.arch.user_dim}, {params.arch.item_dim})")


@dataclass(frozen=True, eq=False)
class BatchBeliefs:
    p_clk: np.ndarray   # (B, n)
    p_abd: np.ndarray   # (B, n)
    r_lift: np.ndarray  # (B, n, m)
    r_abd: np.ndarray   # (B, m)


def predict_batch(params: ModelParams, users: np.ndarray, items: np.ndarray) -> BatchBeliefs:
    users = np.asarray(users, dtype=np.float64)
    items = np.asarray(items, dtype=np.float64)
    _check_dims(params, users, items)
    B, n, _ = items.shape
    m = params.arch.m
    x = _pairs(users, items)
    probs = _softmax(_forward(params.heads["prob"], x)[0]).reshape(B, n, 3)
    value = _forward(params.heads[params.arch.value_head], x)[0].reshape(B, n, m)
    if params.arch.variant == "no_lift":
        r_abd = np.zeros((B, m))
    else:
        r_abd = _forward(params.heads["abd_reward"], users)[0]
    if params.arch.variant == "two_model":
        value = value - r_abd[:, None, :]
    return BatchBeliefs(probs[..., 0], probs[..., 1], value, r_abd)


def predict_beliefs(params: ModelParams, state: UserState) -> SlateBeliefs:
    """Evaluate every head for every candidate of one state."""
    bb = predict_batch(params, state.user_features[None, :], state.item_features[None, :, :])
    return SlateBeliefs(bb.p_clk[0], bb.p_abd[0], bb.r_lift[0], bb.r_abd[0])


def predict_lift(params: ModelParams, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Lift vectors for (user, item) pairs given as (N, du) and (N, di)."""
    return predict_batch(params, users, items[:, None, :]).r_lift[:, 0, :]


def predict_abd(params: ModelParams, users: np.ndarray) -> np.ndarray:
    if params.arch.variant == "no_lift":
        return np.zeros((len(users), params.arch.m))
    return _forward(params.heads["abd_reward"], np.asarray(users, dtype=np.float64))[0]


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StepBatch:
    """Training rows: item features are in display order."""

    user_features: np.ndarray  # (B, du)
    item_features: np.ndarray  # (B, n, di)
    click_pos: np.ndarray      # (B,)
    returns: np.ndarray        # (B, m)

    def __len__(self) -> int:
        return len(self.click_pos)

    def take(self, idx: np.ndarray) -> StepBatch:
        return StepBatch(self.user_features[idx], self.item_features[idx],
                         self.click_pos[idx], self.returns[idx])


def make_batch(steps: Sequence[Step], returns=None) -> StepBatch:
    """Batch from Step objects; ``returns`` defaults to zeros (click loss ignores it)."""
    users = np.array([s.state.user_features for s in steps], dtype=np.float64)
    items = np.array([s.state.item_features[s.action.order] for s in steps], dtype=np.float64)
    clicks = np.array([s.click_pos for s in steps], dtype=np.int64)
    m = steps[0].reward.size
    rets = np.zeros((len(steps), m)) if returns is None else np.asarray(returns, dtype=np.float64)
    return StepBatch(users, items, clicks, rets.reshape(len(steps), -1))


def batch_from_trajectories(trajectories: Sequence[Trajectory], gamma: float) -> StepBatch:
    trajectories = list(trajectories)
    return StepBatch(
        np.concatenate([tr.user_features for tr in trajectories]),
        np.concatenate([tr.displayed_item_features() for tr in trajectories]),
        np.concatenate([tr.click_pos for tr in trajectories]),
        concat_returns(trajectories, gamma),
    )


Grads = dict[str, list[Layer]]


def _zero_grads(params: ModelParams) -> Grads:
    return {name: [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers]
            for name, layers in params.heads.items()}


def abd_loss_and_grad(params: ModelParams, batch: StepBatch) -> tuple[float, Grads]:
    if np.any(batch.click_pos != 0):
        raise ContractViolation("abandonment loss given a clicked step")
    grads = _zero_grads(params)
    if params.arch.variant == "no_lift":
        return float(np.mean(batch.returns ** 2)), grads
    layers = params.heads["abd_reward"]
    pred, acts = _forward(layers, batch.user_features)
    diff = pred - batch.returns
    grads["abd_reward"] = _backward(layers, acts, 2.0 * diff / diff.size)
    return float(np.mean(diff * diff)), grads


def lift_loss_and_grad(params: ModelParams, batch: StepBatch,
                       stop_gradient: bool = True) -> tuple[float, Grads]:
    """MSE of lift(u, clicked) + abd(u) against the return.

    With ``stop_gradient`` the abandonment head is a constant here and its
    gradient is exactly zero.
    """
    if np.any(batch.click_pos < 1):
        raise ContractViolation("lift loss given an abandoned step")
    rows = np.arange(len(batch))
    clicked = batch.item_features[rows, batch.click_pos - 1]
    x = np.concatenate([batch.user_features, clicked], axis=1)
    head = params.arch.value_head
    pred, acts = _forward(params.heads[head], x)
    use_abd = params.arch.variant == "lift"
    if use_abd:
        abd_pred, abd_acts = _forward(params.heads["abd_reward"], batch.user_features)
        pred = pred + abd_pred
    diff = pred - batch.returns
    dout = 2.0 * diff / diff.size
    grads = _zero_grads(params)
    grads[head] = _backward(params.heads[head], acts, dout)
    if use_abd and not stop_gradient:
        grads["abd_reward"] = _backward(params.heads["abd_reward"], abd_acts, dout)
    return float(np.mean(diff * diff)), grads


def click_loss_and_grad(params: ModelParams, batch: StepBatch) -> tuple[float, Grads]:
    """Mean negative cascade log-likelihood of the observed click positions."""
    B, n, _ = batch.item_features.shape
    x = _pairs(batch.user_features, batch.item_features)
    layers = params.heads["prob"]
    logits, acts = _forward(layers, x)
    p = _softmax(logits).reshape(B, n, 3)
    c, d = p[..., 0], p[..., 1]
    loglik = log_likelihood_batch(c, d, batch.click_pos)
    loss = -float(np.mean(loglik))

    gz = np.zeros((B, n, 3))  # d log P / d logits
    live = loglik > np.log(PROB_FLOOR)
    clicked = live & (batch.click_pos > 0)
    if clicked.any():
        rows = np.flatnonzero(clicked)
        k = batch.click_pos[rows] - 1
        before = np.arange(n)[None, :] < k[:, None]
        sub = -p[rows]
        sub[..., 2] += before
        at = np.zeros((len(rows), n), dtype=bool)
        at[np.arange(len(rows)), k] = True
        sub[..., 0] += at
        sub[~(before | at)] = 0.0
        gz[rows] = sub
    abandoned = live & (batch.click_pos == 0)
    if abandoned.any():
        rows = np.flatnonzero(abandoned)
        cc = np.ascontiguousarray(c[rows])
        dd = np.ascontiguousarray(d[rows])
        p0, dc, dd_ = _kernels.abandon_prob_grad(cc, dd)
        g = np.zeros((len(rows), n, 3))
        g[..., 0] = dc / p0[:, None]
        g[..., 1] = dd_ / p0[:, None]
        pr = p[rows]
        gz[rows] = pr * (g - np.sum(pr * g, axis=2, keepdims=True))
    grads = _zero_grads(params)
    grads["prob"] = _backward(layers, acts, (-gz / B).reshape(B * n, 3))
    return loss, grads


def loss_abd(params: ModelParams, batch: StepBatch) -> float:
    return abd_loss_and_grad(params, batch)[0]


def loss_lift(params: ModelParams, batch: StepBatch) -> float:
    return lift_loss_and_grad(params, batch)[0]


def loss_click(params: ModelParams, batch: StepBatch) -> float:
    return click_loss_and_grad(params, batch)[0]


def flatten_grads(params: ModelParams, grads: Grads) -> np.ndarray:
    parts = []
    for name in params.head_names():
        for gW, gb in grads[name]:
            parts += [gW.ravel(), gb]
    return np.concatenate(parts)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 64
    steps_per_iteration: int = 20
    seed: int = 0
    gamma: float = 0.9
    stop_gradient: bool = True

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps_per_iteration < 0:
            raise ValidationError("learning_rate and batch_size must be positive, "
                                  "steps_per_iteration non-negative")


def sgd_step(params: ModelParams, grads: Grads, lr: float) -> ModelParams:
    heads = {}
    for name, layers in params.heads.items():
        heads[name] = tuple((W - lr * gW, b - lr * gb)
                            for (W, b), (gW, gb) in zip(layers, grads[name]))
    return ModelParams(params.arch, heads)


@dataclass
class TrainStats:
    loss_abd: float = float("nan")
    loss_lift: float = float("nan")
    loss_click: float = float("nan")


def train_on_batch_table(params: ModelParams, table: StepBatch, cfg: TrainConfig,
                         rng: np.random.Generator) -> tuple[ModelParams, TrainStats]:
    stats = TrainStats()
    phases = (
        ("loss_abd", np.flatnonzero(table.click_pos == 0),
         lambda p, b: abd_loss_and_grad(p, b)),
        ("loss_lift", np.flatnonzero(table.click_pos > 0),
         lambda p, b: lift_loss_and_grad(p, b, cfg.stop_gradient)),
        ("loss_click", np.arange(len(table)),
         lambda p, b: click_loss_and_grad(p, b)),
    )
    for name, pool, fn in phases:
        if name == "loss_abd" and params.arch.variant == "no_lift":
            continue
        if pool.size == 0 or cfg.steps_per_iteration == 0:
            continue
        total = 0.0
        for _ in range(cfg.steps_per_iteration):
            idx = pool[rng.integers(pool.size, size=cfg.batch_size)]
            loss, grads = fn(params, table.take(idx))
            params = sgd_step(params, grads, cfg.learning_rate)
            total += loss
        setattr(stats, name, total / cfg.steps_per_iteration)
    return params, stats


def train_iteration_with_stats(params: ModelParams, buffer: Iterable[Trajectory],
                               cfg: TrainConfig) -> tuple[ModelParams, TrainStats]:
    trajectories = list(buffer)
    if not trajectories:
        raise ContractViolation("cannot train on an empty buffer")
    table = batch_from_trajectories(trajectories, cfg.gamma)
    return train_on_batch_table(params, table, cfg, np.random.default_rng(cfg.seed))


def train_iteration(params: ModelParams, buffer: Iterable[Trajectory],
                    cfg: TrainConfig) -> ModelParams:
    """Abandon loss, then lift loss, then click loss; ``steps_per_iteration`` SGD steps each."""
    return train_iteration_with_stats(params, buffer, cfg)[0]


# --------------------------------------------------------------------------
# snapshots
# --------------------------------------------------------------------------

def save_params(path: str | Path, params: ModelParams, extra: Mapping | None = None) -> None:
    desc = params.arch.descriptor()
    desc["extra"] = dict(extra or {})
    arrays = {"__descriptor__": np.frombuffer(json.dumps(desc, sort_keys=True).encode(),
                                              dtype=np.uint8)}
    for name in params.head_names():
        for li, (W, b) in enumerate(params.heads[name]):
            arrays[f"{name}.{li}.W"] = W
            arrays[f"{name}.{li}.b"] = b
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def read_descriptor(path: str | Path) -> dict:
    with np.load(path) as data:
        if "__descriptor__" not in data:
            raise SnapshotMismatch(f"{path} has no architecture descriptor")
        return json.loads(bytes(data["__descriptor__"]).decode())


def load_params(path: str | Path, expected: Architecture | None = None) -> ModelParams:
    desc = read_descriptor(path)
    arch = Architecture.from_descriptor(desc)
    if expected is not None and arch != expected:
        raise SnapshotMismatch(f"snapshot architecture {arch} does not match expected {expected}")
    heads = {}
    with np.load(path) as data:
        for name, dims in arch.layer_sizes().items():
            heads[name] = tuple((data[f"{name}.{li}.W"].copy(), data[f"{name}.{li}.b"].copy())
                                for li in range(len(dims) - 1))
    return ModelParams(arch, heads)
