"""Numpy/scipy implementations of the surface-distance kernels.

Always importable; `_distkern.pyx` is the compiled twin with the same
contract. Keep the two in sync.

Surface definition: a foreground voxel is surface if at least one face
neighbor (6-connectivity in 3D, 4 in 2D) is background or outside the grid.
Coordinates come back in lexicographic order, matching np.argwhere on a
C-ordered array.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def _shifted(fg: np.ndarray, axis: int, step: int) -> np.ndarray:
    """Neighbor values along one axis; out-of-grid counts as background."""
    out = np.zeros_like(fg)
    src = [slice(None)] * fg.ndim
    dst = [slice(None)] * fg.ndim
    if step > 0:
        dst[axis] = slice(0, -1)
        src[axis] = slice(1, None)
    else:
        dst[axis] = slice(1, None)
        src[axis] = slice(0, -1)
    out[tuple(dst)] = fg[tuple(src)]
    return out


def _surface(fg: np.ndarray) -> np.ndarray:
    interior = fg.copy()
    for ax in range(fg.ndim):
        interior &= _shifted(fg, ax, 1) & _shifted(fg, ax, -1)
    return fg & ~interior


def surface_coords_3d(m: np.ndarray) -> np.ndarray:
    return np.argwhere(_surface(m.astype(bool))).astype(np.int64)


def surface_coords_2d(m: np.ndarray) -> np.ndarray:
    return np.argwhere(_surface(m.astype(bool))).astype(np.int64)


def nn_dists_3d(a, b, sz, sy, sx) -> np.ndarray:
    scale = np.array([sz, sy, sx], dtype=np.float64)
    tree = cKDTree(b * scale)
    d, _ = tree.query(a * scale, k=1)
    return np.asarray(d, dtype=np.float64).reshape(-1)


def nn_dists_2d(a, b, sy, sx) -> np.ndarray:
    scale = np.array([sy, sx], dtype=np.float64)
    tree = cKDTree(b * scale)
    d, _ = tree.query(a * scale, k=1)
    return np.asarray(d, dtype=np.float64).reshape(-1)
