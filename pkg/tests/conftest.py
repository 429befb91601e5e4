import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from rose_lab.model import ModelConfig, RoseModel  # noqa: E402


@pytest.fixture
def toy_config():
    return ModelConfig(lookback=64, patch_len=16, d_model=16, n_heads=4, enc_layers=1, dec_layers=1,
                       n_r=2, horizons=(96, 192), k_f=2, register_size=8, top_k=3, dropout=0.0)


@pytest.fixture
def toy_model(toy_config):
    torch.manual_seed(0)
    return RoseModel(toy_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
