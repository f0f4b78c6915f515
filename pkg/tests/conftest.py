from __future__ import annotations

import numpy as np
import pytest

from lrf_lab.constraint import WeightVector
from lrf_lab.models import Architecture, init_params
from lrf_lab.simulator import WorldConfig, init_world, rollout_batch
from lrf_lab.trainer import ModelPolicy, PolicySnapshot, TrajectoryBuffer

# filled by tests/test_acceptance.py: criterion number -> (passed, detail)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def small_world():
    cfg = WorldConfig(num_users=6, num_items=12, feature_dim=3, n=4, horizon=6, seed=3)
    return cfg, init_world(cfg)


@pytest.fixture
def tiny_buffer(small_world):
    cfg, gt = small_world

    def make(epsilon: float, m: int = 1, trajectories: int = 30, seed: int = 0):
        arch = Architecture(cfg.feature_dim, cfg.feature_dim, m)
        params = init_params(arch, seed)
        policy = ModelPolicy(PolicySnapshot(params, WeightVector.initial(m), epsilon))
        buf = TrajectoryBuffer(trajectories)
        buf.extend(rollout_batch(gt, policy, trajectories, cfg.horizon,
                                 np.random.default_rng(seed)))
        return buf, params

    return make


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
