import numpy as np
import pytest

from trans_action.models.tensor import precision, set_debug
from trans_action.models.transaction import ModelConfig
from trans_action.services.dataset import build_action_space
from trans_action.services.synthetic import SyntheticConfig, synthesize

TINY_VOCAB = dict(n_verbs=3, n_nouns=4, n_actions=5)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training property checks")


@pytest.fixture(autouse=True)
def _reset_numerics():
    set_debug(False)
    yield
    set_debug(False)


@pytest.fixture
def float64():
    with precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Two blocks, d_m = 8, N = 4: the configuration the gradient check uses."""
    return ModelConfig(d_rgb=8, d_flow=8, d_obj=8, n_frames=4, n_blocks=2, heads=2, **TINY_VOCAB)


@pytest.fixture
def tiny_synthetic():
    return SyntheticConfig(
        seed=3, n_samples=32, n_frames=4, d_rgb=8, d_flow=8, d_obj=8,
        n_participants=4, unseen_fraction=0.25, val_fraction=0.2, **TINY_VOCAB,
    )


@pytest.fixture
def tiny_dataset(tiny_synthetic):
    samples = synthesize(tiny_synthetic)
    return samples, build_action_space(samples, **TINY_VOCAB)
