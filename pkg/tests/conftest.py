"""Pytest configuration and fixtures."""

import os
import sys
import tempfile
from pathlib import Path

import pytest
import torch

APP_DIR = os.path.join(os.path.dirname(__file__), "../mdps_detector/app")
sys.path.insert(0, os.path.abspath(APP_DIR))
# Shared stub denoisers
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from dataset_loader import generate_synthetic  # noqa: E402
from denoiser import CompactDenoiser  # noqa: E402
from noise_schedule import build_schedule  # noqa: E402
from perception import ToyBackbone  # noqa: E402
from stub_denoisers import ScaledDenoiser  # noqa: E402

CONFIG_DIR = Path(__file__).resolve().parent.parent / "mdps_detector" / "config"


@pytest.fixture
def config_dir():
    """Directory holding the shipped JSON presets."""
    return CONFIG_DIR


@pytest.fixture
def temp_dir():
    """Create a temporary directory for tests."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def schedule():
    """Full-length linear schedule (T_max = 1000)."""
    return build_schedule()


@pytest.fixture
def short_schedule():
    return build_schedule(t_max=100)


@pytest.fixture
def scaled_denoiser():
    return ScaledDenoiser().eval()


@pytest.fixture
def compact_denoiser():
    """Small seeded CompactDenoiser in float64 for gradient checks."""
    torch.manual_seed(1234)
    return CompactDenoiser(in_channels=3, hidden_channels=8, embedding_dim=16).double().eval()


@pytest.fixture
def toy_backbone():
    return ToyBackbone().eval()


@pytest.fixture
def tiny_benchmark():
    """Seeded 32x32 synthetic benchmark: 4 train, 2 normal + 3 anomalous test images."""
    return generate_synthetic(seed=7, n_train=4, n_test_normal=2, n_test_anomalous=3, size=32)


@pytest.fixture
def image_pair():
    """Two random model-space images (3, 16, 16) with a fixed seed."""
    generator = torch.Generator().manual_seed(99)
    y = torch.rand(3, 16, 16, generator=generator) * 2 - 1
    other = torch.rand(3, 16, 16, generator=generator) * 2 - 1
    return y, other
