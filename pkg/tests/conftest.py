import os

os.environ.setdefault("CARTOSEG_TEST_MODE", "1")

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model():
    from cartoseg.encoder import VisionTransformer, preset_config

    torch.manual_seed(0)
    return VisionTransformer(preset_config("tiny", in_channels=1), image_size=16)
