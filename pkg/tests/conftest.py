import numpy as np
import pytest

from shiftsim.model import ModelConfig, init_weights


@pytest.fixture(scope="session")
def tiny_config():
    # smallest config that still shards over P in {1, 2, 4}
    return ModelConfig(
        n_layers=2, n_heads=4, head_dim=8, ffn_dim=64, vocab_size=64, max_seq=256
    )


@pytest.fixture(scope="session")
def tiny_weights(tiny_config):
    return init_weights(tiny_config, seed=3)


@pytest.fixture(scope="session")
def default_config():
    return ModelConfig()


def seeded_prompt(seed, length, vocab):
    rng = np.random.default_rng(seed)
    return [int(x) for x in rng.integers(0, vocab, size=length)]
