import os
import sys

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src'))

from dataset import MultiStreamTrial, generate_from_settings
from settings import Settings


def tiny_settings(**values) -> Settings:
    """Desk-scale settings that keep a full train/evaluate cycle to seconds"""
    base = dict(
        n_states=3, n_techniques=2, n_users=2, n_trials=4, segments_per_trial=3,
        kin_channels=3, vis_raw_dim=3, evt_channels=2,
        n_vis=4, n_kin=4, n_evt=2, attention_size=3, latent_size=3, estimator_hidden=4, t_obs=4,
        epochs=1, batch_size=16, pretrain_epochs=1, bptt_length=10, train_stride=3,
        k_min=2, k_max=3, restarts=2,
    )
    base.update(values)
    return Settings().with_values(**base)


def make_trial(trial_id: str, states, user: int = 0, technique: int = 0, n_states: int = 3,
               kin=None, vis=None, evt=None, seed: int = 0) -> MultiStreamTrial:
    states = np.asarray(states, dtype=np.int64)
    rng = np.random.default_rng(seed)
    length = len(states)
    return MultiStreamTrial(
        trial_id=trial_id, user_id=user, technique_id=technique, n_states=n_states,
        kin=rng.normal(size=(length, 3)) if kin is None else kin,
        vis=rng.normal(size=(length, 3)) if vis is None else vis,
        evt=(rng.uniform(size=(length, 2)) < 0.5).astype(np.float64) if evt is None else evt,
        states=states,
    )


@pytest.fixture(scope='session')
def settings() -> Settings:
    return tiny_settings()


@pytest.fixture(scope='session')
def trials(settings):
    return generate_from_settings(settings.data, seed=5)
