from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def random_mask(rng: np.random.Generator, shape, p=0.4) -> np.ndarray:
    """Random boolean mask; includes empty and full outcomes over many draws."""
    return rng.random(shape) < p


def random_blob_mask(rng: np.random.Generator, shape) -> np.ndarray:
    """A random filled ball, more surface-like than iid noise."""
    nz, ny, nx = shape
    c = rng.uniform(0.2, 0.8, size=3) * np.array([nz, ny, nx])
    r = rng.uniform(0.15, 0.4) * min(shape)
    zz, yy, xx = np.ogrid[:nz, :ny, :nx]
    return (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2 <= r**2


@pytest.fixture
def rng():
    return np.random.default_rng(20230814)
