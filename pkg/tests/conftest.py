import numpy as np
import pytest

from nodulenet.volume import PhantomSpec, Volume, generate_phantom


@pytest.fixture(scope="session")
def phantom():
    return generate_phantom(PhantomSpec(label=0, seed=5, nodule_radius_mm=4.0))


@pytest.fixture
def ramp_volume():
    # HU = 10 x + 100 y + 1000 z in voxel units, so trilinear sampling is exact
    z, y, x = np.meshgrid(np.arange(6), np.arange(5), np.arange(4), indexing="ij")
    vals = (10 * x + 100 * y + 1000 * z).astype(np.float32)
    return Volume(vals, (0.5, 0.5, 1.0), (1.0, 2.0, 3.0))
