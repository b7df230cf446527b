import pytest

from zosim import ModelConfig, ZoHyper, init_model, make_batch


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=16, d_model=16, n_heads=2, n_blocks=2, seq_len=8)


@pytest.fixture
def tiny_store(tiny_config):
    return init_model(tiny_config, init_seed=7)


@pytest.fixture
def tiny_batch(tiny_config):
    return make_batch(tiny_config, batch_size=4, seed=5)


@pytest.fixture
def hyper():
    return ZoHyper(epsilon=1e-3, lr=1e-2, steps=4)
