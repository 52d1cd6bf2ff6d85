import numpy as np
import pytest

from dkvcache import ModelConfig, init_weights


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(
        n_layers=2, n_heads=2, d_model=64, d_head=32, d_ff=128,
        vocab_size=128, mask_token_id=127, max_positions=512, weight_seed=11,
    )


@pytest.fixture(scope="session")
def tiny_weights(tiny_config):
    return init_weights(tiny_config)


@pytest.fixture(scope="session")
def toy_config():
    """The acceptance-scale model: 4 layers, 4 heads, d_model 128, vocab 512."""
    return ModelConfig(
        n_layers=4, n_heads=4, d_model=128, d_head=32, d_ff=256,
        vocab_size=512, mask_token_id=511, max_positions=2048, weight_seed=7,
    )


@pytest.fixture(scope="session")
def toy_weights(toy_config):
    return init_weights(toy_config)


@pytest.fixture
def rng():
    return np.random.default_rng(123)
