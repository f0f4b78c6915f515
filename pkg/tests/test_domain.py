from __future__ import annotations

import io

import numpy as np
import pytest

from lrf_lab.domain import (
    CandidateItem,
    ContractViolation,
    DiscountConfig,
    Permutation,
    Step,
    Trajectory,
    UserState,
    ValidationError,
    concat_returns,
    discounted_return,
    read_trajectory_log,
    reward_vector,
    validate_permutation,
    write_trajectory_log,
)


def _traj(rewards, n=2, d=3):
    rewards = np.asarray(rewards, dtype=float)
    if rewards.ndim == 1:
        rewards = rewards[:, None]
    T = len(rewards)
    return Trajectory(
        user_ids=np.zeros(T, dtype=np.int64),
        user_features=np.zeros((T, d)),
        item_ids=np.tile(np.arange(n), (T, 1)),
        item_features=np.zeros((T, n, d)),
        orders=np.tile(np.arange(n), (T, 1)),
        promoted=np.full(T, -1),
        click_pos=np.ones(T, dtype=np.int64),
        rewards=rewards,
    )


class TestDiscountedReturn:
    def test_single_step(self):
        assert discounted_return(_traj([1.0]), 0, DiscountConfig(0.9)) == pytest.approx([1.0])

    def test_geometric_sum(self):
        got = discounted_return(_traj([1.0, 2.0, 4.0]), 0, DiscountConfig(0.5))
        assert got[0] == 3.0

    def test_vector_tail(self):
        got = discounted_return(_traj([[1, 0], [0, 2]]), 1, DiscountConfig(0.9))
        np.testing.assert_array_equal(got, [0.0, 2.0])

    def test_out_of_range(self):
        with pytest.raises(ContractViolation):
            discounted_return(_traj([1.0, 2.0]), 2, DiscountConfig(0.9))
        with pytest.raises(ContractViolation):
            discounted_return(_traj([1.0]), -1, DiscountConfig(0.9))

    def test_recurrence_is_exact(self):
        rng = np.random.default_rng(0)
        tr = _traj(rng.normal(size=(30, 2)))
        cfg = DiscountConfig(0.93)
        for t in range(len(tr) - 1):
            lhs = discounted_return(tr, t, cfg)
            rhs = tr.rewards[t] + cfg.gamma * discounted_return(tr, t + 1, cfg)
            np.testing.assert_array_equal(lhs, rhs)

    def test_linear_in_rewards(self):
        rng = np.random.default_rng(1)
        r = rng.normal(size=(12, 3))
        a = _traj(r).returns(0.8)
        b = _traj(3.7 * r).returns(0.8)
        np.testing.assert_allclose(b, 3.7 * a, rtol=1e-12)

    def test_concat_matches_per_trajectory(self):
        rng = np.random.default_rng(2)
        trs = [_traj(rng.normal(size=(k, 2))) for k in (1, 4, 7)]
        got = concat_returns(trs, 0.7)
        want = np.concatenate([t.returns(0.7) for t in trs])
        np.testing.assert_array_equal(got, want)

    @pytest.mark.parametrize("gamma", [0.0, 1.0, -0.1, 1.5])
    def test_gamma_open_interval(self, gamma):
        with pytest.raises(ValidationError):
            DiscountConfig(gamma)


class TestPermutation:
    def test_valid(self):
        p = validate_permutation([2, 1, 3])
        assert p.one_based() == [2, 1, 3]
        np.testing.assert_array_equal(p.order, [1, 0, 2])

    def test_duplicate(self):
        with pytest.raises(ValidationError, match="duplicate index 1"):
            validate_permutation([1, 1, 3])

    def test_out_of_range(self):
        with pytest.raises(ValidationError, match="out of range index 4"):
            validate_permutation([1, 2, 4], n=3)

    def test_zero_based_constructor_checks(self):
        with pytest.raises(ValidationError):
            Permutation(np.array([0, 0]))
        with pytest.raises(ValidationError):
            Permutation(np.array([], dtype=int))

    def test_equality_and_hash(self):
        a = Permutation(np.array([1, 0]), promoted=1)
        b = Permutation(np.array([1, 0]), promoted=1)
        assert a == b and hash(a) == hash(b)
        assert a != Permutation(np.array([1, 0]))

    def test_immutable(self):
        p = Permutation.identity(3)
        with pytest.raises(ValueError):
            p.order[0] = 2


class TestStateAndStep:
    def test_user_state_rejects_duplicates(self):
        with pytest.raises(ValidationError):
            UserState(0, [0.0], [1, 1], np.zeros((2, 2)))

    def test_user_state_from_candidates(self):
        st = UserState.from_candidates(7, [1.0, 2.0], [CandidateItem(3, [0.1]), CandidateItem(5, [0.2])])
        assert st.n == 2
        assert [c.item_id for c in st.candidates] == [3, 5]

    def test_step_clicked_item(self):
        st = UserState(0, [0.0], [10, 11, 12], np.zeros((3, 1)))
        step = Step(st, validate_permutation([3, 1, 2]), 1, reward_vector([1.0]))
        assert step.clicked_item == 2
        assert Step(st, Permutation.identity(3), 0, [0.0]).clicked_item is None

    def test_step_click_range(self):
        st = UserState(0, [0.0], [10, 11], np.zeros((2, 1)))
        with pytest.raises(ValidationError):
            Step(st, Permutation.identity(2), 3, [0.0])

    def test_reward_vector_checks(self):
        with pytest.raises(ValidationError):
            reward_vector([np.nan])
        with pytest.raises(ValidationError):
            reward_vector([1.0, 2.0], m=3)
        with pytest.raises(ValidationError):
            reward_vector([])

    def test_trajectory_roundtrip_through_steps(self):
        st = UserState(4, [0.5, 0.1], [10, 11], np.arange(4.0).reshape(2, 2))
        steps = [Step(st, Permutation(np.array([1, 0]), promoted=1), 2, [1.5]),
                 Step(st, Permutation.identity(2), 0, [0.25])]
        tr = Trajectory.from_steps(steps, trajectory_id=3)
        assert len(tr) == 2 and tr.m == 1 and tr.n == 2
        back = tr.steps
        assert back[0].action == steps[0].action
        assert back[0].clicked_item == 0
        np.testing.assert_array_equal(tr.displayed_item_features()[0], st.item_features[[1, 0]])

    def test_empty_trajectory(self):
        with pytest.raises(ValidationError):
            Trajectory.from_steps([])


def test_log_roundtrip(tmp_path):
    st = UserState(4, [0.5], [10, 11, 12], np.zeros((3, 1)))
    steps = [Step(st, validate_permutation([3, 1, 2]), 2, [1.0, -0.5]),
             Step(st, Permutation.identity(3), 0, [0.0, 0.0])]
    tr = Trajectory.from_steps(steps, trajectory_id=9)
    path = tmp_path / "log.jsonl"
    assert write_trajectory_log([tr], path) == 2
    recs = read_trajectory_log(path)
    assert recs[0] == {"trajectory_id": 9, "step_index": 0, "user_id": 4,
                       "item_ids": [12, 10, 11], "click_pos": 2, "reward": [1.0, -0.5]}
    assert recs[1]["click_pos"] == 0


def test_log_missing_field():
    with pytest.raises(ValidationError, match="line 1"):
        read_trajectory_log(io.StringIO('{"trajectory_id": 1}\n'))
