"""Pytest configuration and shared fixtures."""

import numpy as np
import pytest

from hyperpoint.models import (
    AttentionConfig,
    AttentionKind,
    FusionConfig,
    FusionKind,
    GridSpec,
    ModelConfig,
    PointCloud,
    RasterGrid,
)
from hyperpoint.network import BACKBONE_REGISTRY


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run training benchmarks and ablation orderings")


@pytest.fixture
def rng():
    """Seeded generator so every test sees the same draws."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_cloud(rng):
    """64 labelled points with 4 bands in a 10 x 10 x 2 box."""
    coords = rng.uniform([0.0, 0.0, 0.0], [10.0, 10.0, 2.0], size=(64, 3))
    attrs = rng.uniform(0.0, 1.0, size=(64, 4))
    labels = rng.integers(1, 3, size=64)
    return PointCloud(coords=coords, attrs=attrs, labels=labels, num_classes=3)


@pytest.fixture
def small_grid():
    """4 x 3 grid of 1 m cells with its lower-left corner at the origin."""
    return GridSpec(origin_xy=(0.0, 0.0), cell=1.0, width=4, height=3)


@pytest.fixture
def spectral_raster(small_grid):
    """Two-band raster whose band 0 is the flat pixel index and band 1 its negative."""
    index = np.arange(12, dtype=np.float64).reshape(3, 4)
    return RasterGrid.from_spec(small_grid, np.stack([index, -index]))


@pytest.fixture
def tiny_model_config():
    """Dual-branch mid-CPA configuration small enough for gradient checks."""
    return ModelConfig(
        stage_widths=[4, 4, 6, 6],
        n_input=64,
        num_classes=3,
        attention=AttentionConfig(kind=AttentionKind.VSA, k=4),
        fusion=FusionConfig(kind=FusionKind.MID_CPA, embed_width=4),
        spectral_width=2,
        seed=7,
    )


@pytest.fixture(autouse=True)
def reset_backbone_registry():
    """Reset backbone registry after each test to prevent side effects."""
    original_registry = BACKBONE_REGISTRY.copy()

    yield

    BACKBONE_REGISTRY.clear()
    BACKBONE_REGISTRY.update(original_registry)


# Markers for test categories
def pytest_configure(config):
    """Configure custom pytest markers."""
    config.addinivalue_line(
        "markers", "unit: mark test as a unit test"
    )
    config.addinivalue_line(
        "markers", "integration: mark test as an integration test"
    )
    config.addinivalue_line(
        "markers", "slow: mark test as slow running"
    )


# Skip slow tests by default unless explicitly requested
def pytest_collection_modifyitems(config, items):
    """Modify test collection to handle markers."""
    if config.getoption("--run-slow"):
        return

    skip_slow = pytest.mark.skip(reason="need --run-slow option to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
