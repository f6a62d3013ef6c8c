"""Shared fixtures; puts src/ on the import path like the entry script does"""

import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(ROOT, 'src'))

from morphology import generate_surrogate_robot, load_robot_spec  # noqa: E402
from policy import PolicyConfig, init_policy_params  # noqa: E402
from surrogate_env import EnvConfig  # noqa: E402

ROBOT_DIR = os.path.join(ROOT, 'robots')


@pytest.fixture(scope='session')
def robot_dir():
    return ROBOT_DIR


@pytest.fixture(scope='session')
def a1():
    return load_robot_spec(os.path.join(ROBOT_DIR, 'unitree_a1.yaml'))


@pytest.fixture(scope='session')
def small_robot():
    """Six-joint generated biped"""
    return generate_surrogate_robot(7, 'biped', (6, 6))


@pytest.fixture(scope='session')
def tiny_config():
    return PolicyConfig(
        latent_dim=8,
        description_hidden=(16, 16),
        observation_hidden=(16, 16),
        core_hidden=(32, 32),
        decoder_description_hidden=(16, 16),
        mean_hidden=(16, 16),
        std_hidden=(8,),
    )


@pytest.fixture(scope='session')
def tiny_params(tiny_config):
    return init_policy_params(tiny_config, np.random.default_rng(0))


@pytest.fixture
def quiet_env():
    return EnvConfig.deterministic()
