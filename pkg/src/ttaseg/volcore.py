"""Volumetric grid types, svol file I/O, and binary-mask metrics.

Grids are (nz, ny, nx) arrays in z-major order with per-axis physical
spacing in mm, anisotropy allowed. Three kinds exist: intensity volumes
(any finite float32), probability maps (float32 in [0, 1]) and boolean
masks. Metrics follow the conventions used throughout the pipeline:

- dice: 2|A n B| / (|A| + |B|), defined as 1.0 when both masks are empty.
- hausdorff95: 95th percentile (nearest-rank, k = ceil(0.95 N)) of the
  pooled bidirectional nearest-surface distances in mm; surface voxels are
  foreground voxels with at least one 6-neighbor background or outside the
  grid. Undefined (None) if either mask is empty.
- assd2d: per-axial-slice mean symmetric surface distance using in-plane
  spacing and 4-neighbor 2D surfaces, averaged over slices where both masks
  have foreground; slices where exactly one mask has foreground are skipped
  by default or charged the in-plane diagonal with one_sided="penalty".
  Undefined (None) if no slice contributes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .exceptions import GeometryError

SVOL_DTYPE = "f32le"


def _as_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or any(not math.isfinite(s) or s <= 0.0 for s in sp):
        raise ValueError(f"spacing_mm must be 3 positive finite reals, got {spacing!r}")
    return sp


@dataclass
class _Grid:
    """Shared shape/spacing plumbing for the three grid kinds."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float]

    _dtype = np.float32
    kind = ""

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=self._dtype)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"grid data must be 3D with positive dims, got shape {arr.shape}")
        self.data = arr
        self.spacing_mm = _as_spacing(self.spacing_mm)
        self._validate_values()

    def _validate_values(self):
        if not np.isfinite(self.data).all():
            raise ValueError(f"{type(self).__name__} contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def nz(self) -> int:
        return self.data.shape[0]

    def same_geometry(self, other) -> bool:
        return self.shape == other.shape and self.spacing_mm == other.spacing_mm

    def require_same_geometry(self, other, what: str = "grids"):
        if not self.same_geometry(other):
            raise GeometryError(
                f"{what} must share geometry: {self.shape}@{self.spacing_mm} vs "
                f"{other.shape}@{other.spacing_mm}"
            )


class Volume(_Grid):
    """Intensity volume."""

    kind = "intensity"


class ProbMap(_Grid):
    """Voxelwise foreground probabilities in [0, 1]."""

    kind = "prob"

    def _validate_values(self):
        super()._validate_values()
        lo = float(self.data.min())
        hi = float(self.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"probabilities outside [0, 1]: min={lo}, max={hi}")


class Mask(_Grid):
    """Binary segmentation mask."""

    kind = "mask"
    _dtype = np.bool_

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != np.bool_:
            vals = np.asarray(arr, dtype=np.float64)
            if not np.isin(vals, (0.0, 1.0)).all():
                raise ValueError("mask data must be boolean or exactly {0, 1}")
        super().__post_init__()

    def _validate_values(self):
        pass

    def count(self) -> int:
        return int(np.count_nonzero(self.data))


_KIND_TO_CLS = {"intensity": Volume, "prob": ProbMap, "mask": Mask}


def payload_path(path) -> Path:
    return Path(str(path) + ".raw")


def save_svol(grid: _Grid, path) -> None:
    """JSON header at `path`, raw little-endian f32 z-major payload beside it."""
    path = Path(path)
    header = {
        "shape": list(grid.shape),
        "spacing_mm": list(grid.spacing_mm),
        "kind": grid.kind,
        "dtype": SVOL_DTYPE,
    }
    path.write_text(json.dumps(header, sort_keys=True) + "\n")
    payload = np.ascontiguousarray(grid.data, dtype="<f4")
    payload_path(path).write_bytes(payload.tobytes(order="C"))


def load_svol(path) -> Volume | ProbMap | Mask:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"unreadable svol header {path}: {exc}") from exc
    for key in ("shape", "spacing_mm", "kind", "dtype"):
        if key not in header:
            raise ValueError(f"svol header {path} missing {key!r}")
    if header["dtype"] != SVOL_DTYPE:
        raise ValueError(f"svol {path}: unsupported dtype {header['dtype']!r}")
    cls = _KIND_TO_CLS.get(header["kind"])
    if cls is None:
        raise ValueError(f"svol {path}: unknown kind {header['kind']!r}")
    shape = tuple(int(n) for n in header["shape"])
    if len(shape) != 3:
        raise ValueError(f"svol {path}: shape must have 3 dims, got {header['shape']!r}")
    raw = payload_path(path).read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ValueError(f"svol {path}: payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return cls(data, tuple(header["spacing_mm"]))


# --- metrics -------------------------------------------------------------


@dataclass
class MetricResult:
    """One pred-vs-reference evaluation; None marks an undefined distance."""

    dice: float
    hausdorff95_mm: float | None
    assd2d_mm: float | None


def binarize(p: ProbMap, t: float = 0.5) -> Mask:
    """Threshold a probability map; foreground is p >= t, t in (0, 1)."""
    if not 0.0 < float(t) < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {t!r}")
    return Mask(p.data >= float(t), p.spacing_mm)


def dice(a: Mask, b: Mask) -> float:
    """Dice overlap; two empty masks count as perfect agreement (1.0)."""
    a.require_same_geometry(b, "dice operands")
    na = a.count()
    nb = b.count()
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a.data & b.data))
    return 2.0 * inter / (na + nb)


def surface_voxels(a: Mask) -> np.ndarray:
    """(N, 3) int64 voxel indices of the 6-neighborhood surface, sorted z,y,x."""
    return kernels.surface_coords_3d(a.data)


def _nearest_rank(sorted_vals: np.ndarray, q: float) -> float:
    k = math.ceil(q * len(sorted_vals))
    return float(sorted_vals[max(k, 1) - 1])


def hausdorff95(a: Mask, b: Mask) -> float | None:
    a.require_same_geometry(b, "hausdorff95 operands")
    if a.count() == 0 or b.count() == 0:
        return None
    sa = kernels.surface_coords_3d(a.data)
    sb = kernels.surface_coords_3d(b.data)
    d_ab = kernels.nn_dists(sa, sb, a.spacing_mm)
    d_ba = kernels.nn_dists(sb, sa, a.spacing_mm)
    pooled = np.sort(np.concatenate([d_ab, d_ba]))
    return _nearest_rank(pooled, 0.95)


def _slice_assd(a2: np.ndarray, b2: np.ndarray, sy: float, sx: float) -> float | None:
    """Mean symmetric 2D surface distance for one slice; None if either is empty."""
    sa = kernels.surface_coords_2d(a2)
    sb = kernels.surface_coords_2d(b2)
    if len(sa) == 0 or len(sb) == 0:
        return None
    d_ab = kernels.nn_dists(sa, sb, (sy, sx))
    d_ba = kernels.nn_dists(sb, sa, (sy, sx))
    return float((d_ab.sum() + d_ba.sum()) / (len(d_ab) + len(d_ba)))


def assd2d(a: Mask, b: Mask, one_sided: str = "skip") -> float | None:
    if one_sided not in ("skip", "penalty"):
        raise ValueError(f"one_sided must be 'skip' or 'penalty', got {one_sided!r}")
    a.require_same_geometry(b, "assd2d operands")
    _, ny, nx = a.shape
    _, sy, sx = a.spacing_mm
    diag = math.hypot((ny - 1) * sy, (nx - 1) * sx)
    vals = []
    for z in range(a.nz):
        a_has = bool(a.data[z].any())
        b_has = bool(b.data[z].any())
        if a_has and b_has:
            vals.append(_slice_assd(a.data[z], b.data[z], sy, sx))
        elif (a_has or b_has) and one_sided == "penalty":
            vals.append(diag)
    if not vals:
        return None
    return float(np.mean(vals))


def compute_metrics(pred: Mask, truth: Mask, one_sided: str = "skip") -> MetricResult:
    return MetricResult(
        dice=dice(pred, truth),
        hausdorff95_mm=hausdorff95(pred, truth),
        assd2d_mm=assd2d(pred, truth, one_sided=one_sided),
    )
