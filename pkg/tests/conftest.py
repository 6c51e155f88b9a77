import numpy as np
import pytest

from dvckit.synth import SpeckleSpec, generate_speckle
from dvckit.volume import Volume


@pytest.fixture(scope="session")
def speckle48():
    """Small two-component speckle shared by the correlation tests."""
    vol, labels = generate_speckle(SpeckleSpec(dims=(48, 48, 48), seed=11))
    return vol, labels


@pytest.fixture(scope="session")
def speckle64():
    vol, labels = generate_speckle(SpeckleSpec(dims=(64, 64, 64), seed=1))
    return vol, labels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def linear_volume(shape, coef, offset=0.0):
    """Gray = offset + cx*x + cy*y + cz*z on a [z, y, x] array."""
    nz, ny, nx = shape
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    return Volume.from_array(offset + coef[0] * x + coef[1] * y + coef[2] * z, "f32")
