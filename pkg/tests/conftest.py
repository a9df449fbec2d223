import numpy as np
import pytest

from greenflow.device import DeviceSpec, build_device


@pytest.fixture(scope="session")
def default_spec():
    return DeviceSpec()


@pytest.fixture(scope="session")
def default_grid(default_spec):
    return build_device(default_spec)


@pytest.fixture(scope="session")
def small_spec():
    """Short device for fast transport tests: 13 slices, 6-site blocks."""
    return DeviceSpec(channel_length=4.0, sd_length=1.0)


@pytest.fixture(scope="session")
def small_grid(small_spec):
    return build_device(small_spec)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
