"""Backend dispatch for the surface-distance kernels.

The compiled extension is preferred when it was built; the numpy/scipy
fallback gives results identical to well under metric tolerances. Override
with TTASEG_KERNELS=numpy or =cython (the latter raises if the extension
is missing). `use()` swaps the backend temporarily, which is what the
benchmark and the equivalence tests do; it is not thread-safe.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from . import _distkern_np

try:
    from . import _distkern
except ImportError:
    _distkern = None


def _select(name: str):
    name = name.strip().lower()
    if name in ("", "auto"):
        return ("cython", _distkern) if _distkern is not None else ("numpy", _distkern_np)
    if name in ("numpy", "py", "python"):
        return "numpy", _distkern_np
    if name in ("cython", "compiled", "c"):
        if _distkern is None:
            raise ImportError("TTASEG_KERNELS asked for the compiled backend but it is not built")
        return "cython", _distkern
    raise ValueError(f"unknown kernel backend {name!r}")


BACKEND, _impl = _select(os.environ.get("TTASEG_KERNELS", "auto"))


def available_backends() -> list[str]:
    out = ["numpy"]
    if _distkern is not None:
        out.append("cython")
    return out


@contextmanager
def use(name: str):
    global BACKEND, _impl
    prev = (BACKEND, _impl)
    BACKEND, _impl = _select(name)
    try:
        yield
    finally:
        BACKEND, _impl = prev


def surface_coords_3d(mask: np.ndarray) -> np.ndarray:
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    if m.ndim != 3:
        raise ValueError(f"expected a 3D mask, got shape {m.shape}")
    return np.asarray(_impl.surface_coords_3d(m), dtype=np.int64)


def surface_coords_2d(mask: np.ndarray) -> np.ndarray:
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    if m.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {m.shape}")
    return np.asarray(_impl.surface_coords_2d(m), dtype=np.int64)


def nn_dists(a_pts: np.ndarray, b_pts: np.ndarray, spacing) -> np.ndarray:
    """Euclidean mm distance from each point in a_pts to its nearest in b_pts."""
    a = np.ascontiguousarray(a_pts, dtype=np.int64)
    b = np.ascontiguousarray(b_pts, dtype=np.int64)
    if len(a) == 0:
        return np.empty(0, dtype=np.float64)
    if len(b) == 0:
        raise ValueError("nearest-distance target point set is empty")
    if a.shape[1] != b.shape[1] or a.shape[1] not in (2, 3):
        raise ValueError(f"point dims mismatch: {a.shape} vs {b.shape}")
    sp = tuple(float(s) for s in spacing)
    if a.shape[1] == 3:
        return _impl.nn_dists_3d(a, b, sp[0], sp[1], sp[2])
    return _impl.nn_dists_2d(a, b, sp[0], sp[1])
