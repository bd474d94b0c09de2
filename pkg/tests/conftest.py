import os
import numpy as np
import pytest
from diffusion.scheduler import build_schedule
from diffusion.unet import UNet
from tests.helpers import tiny_config

GOLDEN_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "golden")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def golden():
    """Compare a string against tests/golden/<name>; record it and skip on the first run."""
    def check(name: str, value: str) -> None:
        path = os.path.join(GOLDEN_DIR, name)
        if not os.path.exists(path):
            os.makedirs(GOLDEN_DIR, exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                f.write(value + "\n")
            pytest.skip(f"recorded golden value {name}")
        with open(path, "r", encoding="utf-8") as f:
            assert f.read().strip() == value
    return check


@pytest.fixture
def tiny_model():
    return UNet(tiny_config())


@pytest.fixture
def tiny_latents(rng):
    """[4 frames, 4 channels, 4, 4]."""
    return rng.standard_normal((4, 4, 4, 4))


@pytest.fixture
def sched10():
    return build_schedule(1000, 0.00085, 0.012, 10)
