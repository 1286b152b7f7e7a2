from __future__ import annotations

import numpy as np
import pytest

from app.schemas.experiment import AgentHyperparams, EsParams, WorkspaceSpec


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_hyper() -> AgentHyperparams:
    return AgentHyperparams(
        hidden_dims=(16, 16),
        buffer_size=500,
        batch_size=8,
        warmup=20,
        actor_lr=1e-3,
        critic_lr=1e-3,
    )


@pytest.fixture
def workspace() -> WorkspaceSpec:
    return WorkspaceSpec()


@pytest.fixture
def es_params() -> EsParams:
    return EsParams()
