import numpy as np
import pytest

from lrrl import dataset as ds
from lrrl import envs
from lrrl import lr as lrmod
from lrrl import support_gan as sg

BANDIT_BEHAVIOR = envs.behavior_policy("suboptimal_pd", noise_std=0.1)
BANDIT_SEED = 11
GAN_SEED = 7


@pytest.fixture(scope="session")
def bandit_dataset():
    """The suboptimal narrow-support bandit corpus used across the suite."""
    return ds.generate_dataset("narrow_support_bandit", BANDIT_BEHAVIOR, 20000, seed=BANDIT_SEED)


@pytest.fixture(scope="session")
def bandit_holdout():
    return ds.generate_dataset("narrow_support_bandit", BANDIT_BEHAVIOR, 2000, seed=BANDIT_SEED + 1)


@pytest.fixture(scope="session")
def bandit_support_model(bandit_dataset):
    """Full-budget support model; shared because training takes ~15 s."""
    return sg.train_gan(bandit_dataset, sg.GanConfig(), seed=GAN_SEED)


@pytest.fixture(scope="session")
def bandit_gate(bandit_support_model, bandit_dataset):
    return lrmod.resolve_gate(bandit_support_model, lrmod.LrConfig(), bandit_dataset)


@pytest.fixture(scope="session")
def rare_region_pairs():
    rng = np.random.default_rng(999)
    a = rng.uniform(0.6, 1.0, size=(2000, 1))
    return np.zeros((2000, 1)), a
