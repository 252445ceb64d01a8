"""Shared fixtures: the heavy training runs are computed once per session."""

from __future__ import annotations

import pytest

from dypo.trainer import TrainConfig, run_comparison, train

ACCEPTANCE_SEED = 1
SNAPSHOT_STEPS = (40, 120, 500)


@pytest.fixture(scope="session")
def acceptance_config() -> TrainConfig:
    return TrainConfig(seed=ACCEPTANCE_SEED)


@pytest.fixture(scope="session")
def dypo_run(acceptance_config):
    """Full default 500-step routed run with mid-training snapshots."""
    return train(acceptance_config, snapshot_steps=SNAPSHOT_STEPS)


@pytest.fixture(scope="session")
def baseline_runs(acceptance_config):
    """sft_only and grpo_only trained on the identical seeded stream."""
    return run_comparison(acceptance_config, variants=("sft_only", "grpo_only"))
