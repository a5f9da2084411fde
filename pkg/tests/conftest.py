from __future__ import annotations

import numpy as np
import pytest

from modules.volume_core import BinaryMask


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def box_mask():
    """Factory: mask with the half-open voxel box [lo, hi) set."""

    def make(dims, lo, hi, spacing=(1.0, 1.0, 1.0)) -> BinaryMask:
        fg = np.zeros(dims, dtype=bool)
        fg[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
        return BinaryMask.from_bool(fg, spacing=spacing)

    return make
