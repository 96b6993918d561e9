import numpy as np
import pytest

from savedrl.config import CloneConfig, EnsembleConfig, profile_config
from savedrl.controller import CemConfig


def tiny_config(task_id=1, mode="saved", iterations=3, seeds=(0,)):
    """ci profile shrunk until a whole run takes a few seconds."""
    cfg = profile_config("ci", task_id, mode)
    cfg.seeds = list(seeds)
    cfg.n_iterations = iterations
    cfg.checkpoint_every = 2
    cfg.eval_episodes = 2
    cfg.demos.count = 4
    cfg.dynamics = EnsembleConfig(hidden=(16,), n_members=2, epochs_init=2, epochs_iter=1)
    cfg.value = EnsembleConfig(hidden=(16,), n_members=2, epochs_init=3, epochs_iter=1, learning_rate=1e-3)
    cfg.cem = CemConfig(horizon=cfg.cem.horizon, population=16, elites=4, cem_iterations=2, n_particles=2, mode=mode)
    cfg.clone = CloneConfig(hidden=(16,), epochs=2)
    cfg.validate()
    return cfg


@pytest.fixture
def tiny():
    return tiny_config


@pytest.fixture
def rng():
    return np.random.default_rng(0)
