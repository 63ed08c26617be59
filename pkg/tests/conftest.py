import numpy as np
import pytest

from plumekit.hsi_io import HyperCube


def make_cube(data_hwb, wavelengths, no_data=-9999.0):
    return HyperCube.from_array(np.asarray(data_hwb, dtype=float), wavelengths,
                                no_data=no_data)


@pytest.fixture
def visible_grid():
    # 5 nm AVIRIS-like grid covering visible through SWIR
    return 380.0 + 5.0 * np.arange(432)
