import numpy as np
import pytest

from mergebarrier.model import ModelConfig, init_model


def spiked(cfg, seed, attn_scale=20.0):
    """Random model whose attention weights are large enough to matter."""
    w = init_model(cfg, seed)
    return {k: v * attn_scale if ".attn." in k else v for k, v in w.items()}


@pytest.fixture
def small_cfg():
    return ModelConfig(vocab=24, dim=16, n_layers=2, n_heads=4, n_kv_heads=2, ffn_dim=12, seq_len=10)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
