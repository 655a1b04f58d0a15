import numpy as np
import pytest

from nopeek.autoencoder import ArchConfig, Autoencoder, Checkpoint


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end run that trains models; needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_arch():
    return ArchConfig(
        input_extents=(16, 16, 1), encoder_channels=(4, 8), decoder_channels=(8, 4), decoder_base_channels=4, code_dim=8
    )


@pytest.fixture
def tiny_checkpoint(tiny_arch):
    """Untrained weights drawn from a fixed seed."""
    return Checkpoint.from_network(Autoencoder(tiny_arch, rng=np.random.default_rng(11)))


@pytest.fixture
def tiny_images():
    return np.random.default_rng(12).uniform(-1.0, 1.0, size=(6, 16, 16, 1))
