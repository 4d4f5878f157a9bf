import numpy as np
import pytest
import torch

from aam.denoiser import Denoiser, DenoiserConfig
from aam.schedule import build_schedule

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_model():
    """Randomly initialized 8x8 denoiser (weights are irrelevant for most
    structural properties)."""
    torch.manual_seed(0)
    model = Denoiser(DenoiserConfig(image_size=8))
    model.eval()
    return model


@pytest.fixture(scope="session")
def schedule10():
    return build_schedule(10, "linear", 0.1, 0.2)


@pytest.fixture(scope="session")
def schedule100():
    return build_schedule(100, "linear", 1e-4, 0.02)


def random_images(count, size, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((count, 1, size, size)).astype(np.float32)
