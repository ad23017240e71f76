from pathlib import Path

import numpy as np
import pytest

from app.constants import QuadraticPreset, TaskKind
from app.models.models import ClientObjective, FederatedTask
from app.schemas.experiment import CompressorSpec, ExperimentConfig, ScheduleSpec, TaskSpec

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def quadratic(A, b) -> ClientObjective:
    return ClientObjective(TaskKind.QUADRATIC, np.asarray(A, dtype=float), np.asarray(b, dtype=float))


def shifted_identity_task(d: int = 2, K: int = 2, weight_decay: float = 0.0) -> FederatedTask:
    """A_k = I, b_k = ±e_1."""
    clients = []
    for k in range(K):
        b = np.zeros(d)
        b[0] = 1.0 if k % 2 == 0 else -1.0
        clients.append(quadratic(np.eye(d), b))
    return FederatedTask(tuple(clients), d, weight_decay)


@pytest.fixture
def two_client_task() -> FederatedTask:
    return shifted_identity_task(d=2, K=2)


@pytest.fixture
def make_config(tmp_path):
    """Small random-quadratic config; keyword overrides go to the top level."""

    def factory(**overrides) -> ExperimentConfig:
        data = dict(
            task=TaskSpec(kind=TaskKind.QUADRATIC, preset=QuadraticPreset.RANDOM, clients=4, dim=20, samples_per_client=10),
            compressor=CompressorSpec(k=2),
            schedule=ScheduleSpec(local_lr=0.05, local_steps=3, batch_size=4),
            rounds=5,
            seed=3,
            init_scale=1.0,
            output_dir=tmp_path / "run",
        )
        data.update(overrides)
        return ExperimentConfig(**data)

    return factory
