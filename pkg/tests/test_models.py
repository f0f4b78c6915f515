from __future__ import annotations

import math

import numpy as np
import pytest

from lrf_lab.domain import ContractViolation, ValidationError
from lrf_lab.models import (Architecture, ModelParams, SnapshotMismatch, StepBatch, TrainConfig,
                            abd_loss_and_grad, click_loss_and_grad, flatten_grads, init_params,
                            lift_loss_and_grad, load_params, loss_abd, loss_click, loss_lift,
                            predict_batch, save_params, train_iteration)
from lrf_lab.trainer import TrajectoryBuffer

import oracles
from models_helpers import perturbed_params, synthetic_batch

ARCH = Architecture(3, 2, 2, hidden=(5, 4))


def _set_bias(params: ModelParams, head: str, value) -> ModelParams:
    heads = dict(params.heads)
    layers = list(heads[head])
    W, b = layers[-1]
    layers[-1] = (W, np.full_like(b, value))
    heads[head] = tuple(layers)
    return ModelParams(params.arch, heads)


# ---------------------------------------------------------------- predictions

def test_zero_output_layers_give_zero_values():
    p = init_params(ARCH, 0)
    rng = np.random.default_rng(0)
    bb = predict_batch(p, rng.standard_normal((3, 3)), rng.standard_normal((3, 4, 2)))
    assert np.all(bb.r_lift == 0.0) and np.all(bb.r_abd == 0.0)
    np.testing.assert_allclose(bb.p_clk, 1 / 3)
    np.testing.assert_allclose(bb.p_abd, 1 / 3)


def test_identical_items_identical_beliefs():
    rng = np.random.default_rng(1)
    p = perturbed_params(ARCH, rng)
    items = np.repeat(rng.standard_normal((1, 1, 2)), 4, axis=1)
    bb = predict_batch(p, rng.standard_normal((1, 3)), items)
    assert np.all(bb.p_clk == bb.p_clk[0, 0])
    assert np.all(bb.r_lift == bb.r_lift[0, 0])


def test_probability_structure():
    rng = np.random.default_rng(2)
    p = perturbed_params(ARCH, rng, scale=2.0)
    bb = predict_batch(p, rng.standard_normal((20, 3)), rng.standard_normal((20, 5, 2)))
    assert np.all(bb.p_clk >= 0) and np.all(bb.p_abd >= 0)
    assert np.all(bb.p_clk + bb.p_abd <= 1.0 + 1e-12)


def test_feature_length_mismatch():
    p = init_params(ARCH, 0)
    with pytest.raises(ValidationError):
        predict_batch(p, np.zeros((1, 4)), np.zeros((1, 2, 2)))


def test_parameter_count_order():
    arch = Architecture(8, 8, 1)
    assert 1_000 <= arch.num_parameters() <= 100_000
    assert init_params(arch, 0).num_parameters == arch.num_parameters()


# ---------------------------------------------------------------- loss examples

def test_abd_loss_example():
    arch = Architecture(2, 2, 1, hidden=(3,))
    batch = StepBatch(np.zeros((1, 2)), np.zeros((1, 2, 2)), np.array([0]), np.array([[2.0]]))
    assert loss_abd(init_params(arch, 0), batch) == pytest.approx(4.0)


def test_lift_loss_example():
    arch = Architecture(2, 2, 1, hidden=(3,))
    p = _set_bias(init_params(arch, 0), "abd_reward", 1.0)
    batch = StepBatch(np.zeros((1, 2)), np.zeros((1, 2, 2)), np.array([1]), np.array([[3.0]]))
    assert loss_lift(p, batch) == pytest.approx(4.0)


def test_click_loss_worked_example():
    # one-hot items, hidden unit k echoes item k, output layer sets the logits
    arch = Architecture(1, 2, 1, hidden=(2,))
    p = init_params(arch, 0)
    t = math.tanh(0.5)
    W1 = np.zeros((3, 2))
    W1[1:, :] = 0.5 * np.eye(2)
    logits = np.log([[0.5, 0.2, 0.3], [0.4, 0.1, 0.5]])
    heads = dict(p.heads)
    heads["prob"] = ((W1, np.zeros(2)), (logits / t, np.zeros(3)))
    p = ModelParams(arch, heads)
    batch = StepBatch(np.zeros((1, 1)), np.eye(2)[None], np.array([2]), np.zeros((1, 1)))
    bb = predict_batch(p, batch.user_features, batch.item_features)
    np.testing.assert_allclose(bb.p_clk[0], [0.5, 0.4])
    np.testing.assert_allclose(bb.p_abd[0], [0.2, 0.1])
    assert loss_click(p, batch) == pytest.approx(-math.log(0.12), rel=1e-12)


def test_loss_contracts():
    rng = np.random.default_rng(3)
    p = init_params(ARCH, 0)
    with pytest.raises(ContractViolation):
        loss_abd(p, synthetic_batch(ARCH, rng, click="clicked"))
    with pytest.raises(ContractViolation):
        loss_lift(p, synthetic_batch(ARCH, rng, click="none"))


def test_perfect_predictions_zero_loss():
    rng = np.random.default_rng(4)
    p = perturbed_params(ARCH, rng)
    b = synthetic_batch(ARCH, rng, click="none")
    from lrf_lab.models import predict_abd
    exact = StepBatch(b.user_features, b.item_features, b.click_pos, predict_abd(p, b.user_features))
    assert loss_abd(p, exact) == pytest.approx(0.0, abs=1e-24)


# ---------------------------------------------------------------- gradients

def head_mask(params: ModelParams, head: str) -> np.ndarray:
    parts = []
    for name in params.head_names():
        for W, b in params.heads[name]:
            parts.append(np.full(W.size + b.size, name == head))
    return np.concatenate(parts)


LOSSES = {
    "abd": (abd_loss_and_grad, "none"),
    "lift": (lift_loss_and_grad, "clicked"),
    "click": (click_loss_and_grad, "any"),
}


@pytest.mark.parametrize("name", sorted(LOSSES))
@pytest.mark.parametrize("variant", ["lift", "two_model"])
def test_gradient_matches_finite_differences(name, variant):
    fn, click = LOSSES[name]
    arch = Architecture(3, 2, 2, hidden=(4, 3), variant=variant)
    rng = np.random.default_rng(hash((name, variant)) % 2**32)
    for _ in range(5):
        p = perturbed_params(arch, rng)
        batch = synthetic_batch(arch, rng, size=6, n=3, click=click)
        analytic = flatten_grads(p, fn(p, batch)[1])
        numeric = oracles.central_diff(lambda v: fn(p.with_flat(v), batch)[0], p.flat())
        # the stop-gradient treats the abandonment head as a constant in the lift loss
        keep = ~head_mask(p, "abd_reward") if name == "lift" else slice(None)
        assert oracles.rel_error(analytic[keep], numeric[keep]) <= 1e-4


def test_stop_gradient_blocks_abandon_head():
    rng = np.random.default_rng(5)
    p = perturbed_params(ARCH, rng)
    batch = synthetic_batch(ARCH, rng, click="clicked")
    _, grads = lift_loss_and_grad(p, batch, stop_gradient=True)
    assert all(np.all(gW == 0) and np.all(gb == 0) for gW, gb in grads["abd_reward"])
    _, joint = lift_loss_and_grad(p, batch, stop_gradient=False)
    assert any(np.any(gW != 0) for gW, _ in joint["abd_reward"])


def test_joint_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    p = perturbed_params(ARCH, rng)
    batch = synthetic_batch(ARCH, rng, size=6, n=3, click="clicked")
    analytic = flatten_grads(p, lift_loss_and_grad(p, batch, stop_gradient=False)[1])
    numeric = oracles.central_diff(lambda v: loss_lift(p.with_flat(v), batch), p.flat())
    assert oracles.rel_error(analytic, numeric) <= 1e-4


# ---------------------------------------------------------------- training

def test_steps_zero_leaves_params(tiny_buffer):
    buf, params = tiny_buffer(epsilon=0.1)
    out = train_iteration(params, buf, TrainConfig(steps_per_iteration=0))
    np.testing.assert_array_equal(out.flat(), params.flat())


def test_training_is_deterministic(tiny_buffer):
    buf, params = tiny_buffer(epsilon=0.1)
    cfg = TrainConfig(steps_per_iteration=5, seed=11)
    a = train_iteration(params, buf, cfg)
    b = train_iteration(params, buf, cfg)
    np.testing.assert_array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), params.flat())


def test_empty_buffer_refused():
    with pytest.raises(ContractViolation):
        train_iteration(init_params(ARCH, 0), TrajectoryBuffer(4), TrainConfig())


def test_losses_decrease_on_fixed_data(tiny_buffer):
    from lrf_lab.models import train_iteration_with_stats
    buf, params = tiny_buffer(epsilon=0.1, trajectories=30)
    cfg = TrainConfig(steps_per_iteration=10, learning_rate=0.02)
    first = last = None
    for k in range(100):
        params, stats = train_iteration_with_stats(params, buf, TrainConfig(
            learning_rate=cfg.learning_rate, steps_per_iteration=cfg.steps_per_iteration, seed=k))
        vals = np.array([stats.loss_abd, stats.loss_lift, stats.loss_click])
        first = vals if first is None else first
        last = vals
    assert np.all(last <= first * 1.05)


# ---------------------------------------------------------------- snapshots

def test_snapshot_roundtrip(tmp_path):
    p = perturbed_params(ARCH, np.random.default_rng(7))
    path = tmp_path / "s.npz"
    save_params(path, p)
    q = load_params(path, ARCH)
    np.testing.assert_array_equal(p.flat(), q.flat())


def test_snapshot_mismatch(tmp_path):
    path = tmp_path / "s.npz"
    save_params(path, init_params(ARCH, 0))
    with pytest.raises(SnapshotMismatch):
        load_params(path, Architecture(3, 2, 2, hidden=(6, 4)))
