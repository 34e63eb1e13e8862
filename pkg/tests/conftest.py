import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from semtrack.config import EncoderConfig
from semtrack.model import init_model

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(max(1, torch.get_num_threads()))


# 8x8 images, 2x2 tokens, d = 8: small enough for explicit-loop oracles
TOY = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, num_blocks=1, num_heads=2,
                    adapted_layer_indices=(0,), memory_layers=2, decoder_blocks=1)

# 16x16 images, 4x4 tokens: cheap end-to-end checks
SMALL = EncoderConfig(image_size=16, patch_size=4, embed_dim=16, num_blocks=2, num_heads=2,
                      memory_layers=1, decoder_blocks=1)


@pytest.fixture
def toy_config():
    return TOY


@pytest.fixture
def small_config():
    return SMALL


@pytest.fixture
def small_model():
    return init_model(SMALL, seed=0)


@pytest.fixture
def toy_model64():
    return init_model(TOY, seed=3, dtype=torch.float64)


def random_image(rng: np.random.Generator, size: int) -> np.ndarray:
    return rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)


def random_mask(rng: np.random.Generator, size: int, p: float = 0.3) -> np.ndarray:
    m = (rng.random((size, size)) < p).astype(np.uint8)
    m[size // 2, size // 2] = 1
    return m


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
