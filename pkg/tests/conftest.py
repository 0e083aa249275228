import numpy as np
import pytest

from pfedsam.data import default_client_specs
from pfedsam.federation import FedConfig
from pfedsam.segmodel import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model_config():
    # 32px images, 4x4 token grid: fast enough for many forward/backward passes
    return ModelConfig(image_size=32, patch_size=8, embed_dim=16, depth=1, heads=2, mask_scale=4)


@pytest.fixture
def small_specs():
    clients, unseen = default_client_specs(n_samples=10, seed=3)
    return clients, unseen


@pytest.fixture
def fast_fed():
    return FedConfig(rounds=1, batch_size=4, learning_rate=3e-3, seed=5)
