import numpy as np
import pytest

from desklm.toygen import ToySpec, build_toy_adapters, build_toy_weights


def tiny_spec(**kw):
    base = dict(seed=0, embed_dim=16, num_heads=2, latent_dim=16, num_layers=2,
                mlp_hidden=32, vocab_size=48, max_seq_len=96, n_adapters=2,
                rank=3)
    base.update(kw)
    return ToySpec(**base)


@pytest.fixture
def spec():
    return tiny_spec()


@pytest.fixture
def weights(spec):
    return build_toy_weights(spec)


@pytest.fixture
def adapters(spec):
    return build_toy_adapters(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
