import numpy as np
import pytest

from bootmae.config import ModelConfig, toy_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_model_cfg():
    """The 16x16, P=4, d_enc=32, depth-2 toy architecture."""
    return toy_config().model


@pytest.fixture
def tiny_cfg():
    """Small enough for exhaustive finite differences."""
    return ModelConfig(img_size=8, in_chans=1, patch_size=2, enc_dim=8, enc_depth=2, enc_heads=2,
                       reg_dim=8, reg_heads=2, pred_heads=2, mlp_ratio=2)
