import numpy as np
import pytest
import torch

from hcmt.backbone import NetworkSpec


@pytest.fixture
def tiny_spec():
    # three downsamplings, so 8^3 inputs reach a 1^3 bottleneck
    return NetworkSpec(base_channels=2, encoder_depths=(1, 1, 1, 1), num_scales=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
