"""Shared fixtures: tiny model configs and seeded helpers.

Everything here is deliberately small (dims 16-64) so the full suite stays
fast on one CPU; the acceptance tests build their own larger setups.
"""

import numpy as np
import pytest

from excitor.data import CharTokenizer
from excitor.model import ModelConfig, Transformer


@pytest.fixture(autouse=True)
def f32_default():
    # tests that need f64 switch locally; make sure nothing leaks
    from excitor.tensor import set_precision

    set_precision("f32")
    yield
    set_precision("f32")


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers=2, dim=32, n_heads=4, vocab=64,
                       max_seq=48, mlp_hidden=64)


@pytest.fixture
def tiny_model(tiny_config):
    return Transformer(tiny_config, seed=7)


@pytest.fixture
def tok():
    return CharTokenizer()


@pytest.fixture
def rng_tokens(tiny_config):
    def make(batch, length, seed=11):
        rng = np.random.default_rng(seed)
        return rng.integers(0, tiny_config.vocab, size=(batch, length))
    return make
