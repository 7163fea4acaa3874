"""Seedable test-time-augmentation ensembles with exactly invertible geometry.

Geometric ops are restricted to grid-preserving voxel permutations (axis
flips, in-plane right-angle rotations, y-x transpose) so predictions made in
the augmented frame map back to the original frame bit-exactly. Intensity
ops (gamma, linear) perturb the input only and act on per-volume min-max
normalized intensities; they are never inverted.

Member 0 of an enumerated ensemble is always the identity transform, so the
identity prediction is available for plain soft pseudo-labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import GeometryError, PauseRequested
from .volcore import ProbMap, Volume

_AX_INDEX = {"z": 0, "y": 1, "x": 2}
INTENSITY_KINDS = ("none", "gamma", "linear")

# fixed enumeration order of the 63 non-identity geometric combos
_FLIP_COMBOS = (
    (), ("z",), ("y",), ("x",), ("y", "z"), ("x", "z"), ("x", "y"), ("x", "y", "z"),
)
_GEOM_COMBOS = tuple(
    (f, k, t)
    for f in _FLIP_COMBOS
    for k in range(4)
    for t in (False, True)
    if f or k or t
)


@dataclass(frozen=True)
class IntensityOp:
    """Contrast perturbation on min-max normalized intensities."""

    kind: str = "none"
    gamma: float = 1.0
    scale: float = 1.0
    shift: float = 0.0

    def __post_init__(self):
        if self.kind not in INTENSITY_KINDS:
            raise ValueError(f"intensity kind must be one of {INTENSITY_KINDS}, got {self.kind!r}")
        if self.gamma <= 0.0 or self.scale <= 0.0:
            raise ValueError("gamma and scale must be positive")

    def params(self) -> dict:
        if self.kind == "gamma":
            return {"gamma": self.gamma}
        if self.kind == "linear":
            return {"scale": self.scale, "shift": self.shift}
        return {}


@dataclass(frozen=True)
class TtaTransform:
    id: int
    flip_axes: tuple[str, ...] = ()
    rot90_k: int = 0
    transpose_yx: bool = False
    intensity_op: IntensityOp = field(default_factory=IntensityOp)
    seed: int = 0

    def __post_init__(self):
        axes = tuple(sorted(set(self.flip_axes)))
        if any(a not in _AX_INDEX for a in axes):
            raise ValueError(f"flip axes must be drawn from z/y/x, got {self.flip_axes!r}")
        object.__setattr__(self, "flip_axes", axes)
        if self.rot90_k not in (0, 1, 2, 3):
            raise ValueError(f"rot90_k must be in 0..3, got {self.rot90_k!r}")
        if self.id < 0:
            raise ValueError("transform id must be non-negative")

    @property
    def swaps_inplane(self) -> bool:
        """Whether the net geometric op exchanges the y and x axes."""
        return (self.rot90_k % 2 == 1) != self.transpose_yx

    def is_identity(self) -> bool:
        return (
            not self.flip_axes
            and self.rot90_k == 0
            and not self.transpose_yx
            and self.intensity_op.kind == "none"
        )


def identity_transform(tid: int = 0, seed: int = 0) -> TtaTransform:
    return TtaTransform(id=tid, seed=seed)


@dataclass
class TtaEnsemble:
    """Ordered transforms; member 0 is the identity."""

    transforms: list[TtaTransform]

    def __post_init__(self):
        if not self.transforms:
            raise ValueError("ensemble needs at least one transform")
        ids = [t.id for t in self.transforms]
        if len(set(ids)) != len(ids):
            raise ValueError("transform ids must be unique")
        self.transforms = sorted(self.transforms, key=lambda t: t.id)
        if not self.transforms[0].is_identity():
            raise ValueError("the first ensemble member must be the identity transform")

    @property
    def size(self) -> int:
        return len(self.transforms)


@dataclass(frozen=True)
class TtaConfig:
    """Sampling ranges for enumerate_transforms."""

    gamma_range: tuple[float, float] = (0.7, 1.5)
    scale_range: tuple[float, float] = (0.7, 1.3)
    shift_range: tuple[float, float] = (-0.2, 0.2)
    intensity_kinds: tuple[str, ...] = INTENSITY_KINDS


def enumerate_transforms(n: int, seed: int, config: TtaConfig = TtaConfig()) -> TtaEnsemble:
    """Identity plus n-1 seeded draws over geometry x intensity.

    Geometric combos are taken from a seeded permutation of the 63
    non-identity flip/rot90/transpose combinations (cycled if n > 64);
    intensity kind and parameters are drawn independently per member.
    """
    if n < 2:
        raise ValueError(f"an enumerated ensemble needs at least 2 members, got {n}")
    for kind in config.intensity_kinds:
        if kind not in INTENSITY_KINDS:
            raise ValueError(f"unknown intensity kind {kind!r}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(_GEOM_COMBOS))
    members = [identity_transform(0, seed=int(rng.integers(2**63)))]
    for i in range(1, n):
        flips, k, tp = _GEOM_COMBOS[order[(i - 1) % len(_GEOM_COMBOS)]]
        kind = config.intensity_kinds[int(rng.integers(len(config.intensity_kinds)))]
        if kind == "gamma":
            op = IntensityOp(kind="gamma", gamma=float(rng.uniform(*config.gamma_range)))
        elif kind == "linear":
            op = IntensityOp(
                kind="linear",
                scale=float(rng.uniform(*config.scale_range)),
                shift=float(rng.uniform(*config.shift_range)),
            )
        else:
            op = IntensityOp()
        members.append(
            TtaTransform(
                id=i,
                flip_axes=flips,
                rot90_k=k,
                transpose_yx=tp,
                intensity_op=op,
                seed=int(rng.integers(2**63)),
            )
        )
    return TtaEnsemble(members)


# --- application ----------------------------------------------------------


def _geom_fwd(data: np.ndarray, spacing, t: TtaTransform):
    out = data
    for ax in t.flip_axes:
        out = np.flip(out, _AX_INDEX[ax])
    if t.rot90_k % 4:
        out = np.rot90(out, t.rot90_k, axes=(1, 2))
    if t.transpose_yx:
        out = np.swapaxes(out, 1, 2)
    sz, sy, sx = spacing
    if t.swaps_inplane:
        sy, sx = sx, sy
    return np.array(out, order="C", copy=True), (sz, sy, sx)


def _geom_inv(data: np.ndarray, spacing, t: TtaTransform):
    out = data
    if t.transpose_yx:
        out = np.swapaxes(out, 1, 2)
    if t.rot90_k % 4:
        out = np.rot90(out, -t.rot90_k, axes=(1, 2))
    for ax in reversed(t.flip_axes):
        out = np.flip(out, _AX_INDEX[ax])
    sz, sy, sx = spacing
    if t.swaps_inplane:
        sy, sx = sx, sy
    return np.array(out, order="C", copy=True), (sz, sy, sx)


def _apply_intensity(data: np.ndarray, op: IntensityOp) -> np.ndarray:
    if op.kind == "none":
        return data
    # exact-identity parameters stay bit-exact
    if op.kind == "gamma" and op.gamma == 1.0:
        return data
    if op.kind == "linear" and op.scale == 1.0 and op.shift == 0.0:
        return data
    lo = np.float32(data.min())
    hi = np.float32(data.max())
    if hi <= lo:
        return data
    norm = (data - lo) / (hi - lo)
    if op.kind == "gamma":
        norm = norm ** np.float32(op.gamma)
    else:
        norm = np.float32(op.scale) * norm + np.float32(op.shift)
    return (norm * (hi - lo) + lo).astype(np.float32)


def apply_fwd(t: TtaTransform, v: Volume) -> Volume:
    """Geometry first, then the intensity op, in the transformed frame."""
    data, spacing = _geom_fwd(v.data, v.spacing_mm, t)
    return Volume(_apply_intensity(data, t.intensity_op), spacing)


def apply_inv_geom(t: TtaTransform, p: ProbMap) -> ProbMap:
    """Exact inverse of the geometric part; intensity is never inverted."""
    data, spacing = _geom_inv(p.data, p.spacing_mm, t)
    return ProbMap(data, spacing)


class TtaInferenceError(RuntimeError):
    """A member of the ensemble failed; carries the offending transform id."""

    def __init__(self, transform_id: int, message: str):
        super().__init__(f"transform {transform_id}: {message}")
        self.transform_id = transform_id


def tta_infer(segmenter, v: Volume, ensemble: TtaEnsemble) -> list[ProbMap]:
    """Predictions in the original frame, one per member, in member order."""
    preds = []
    for t in ensemble.transforms:
        try:
            tv = apply_fwd(t, v)
            p = segmenter.predict_soft(tv)
            if not isinstance(p, ProbMap):
                raise TypeError(f"segmenter returned {type(p).__name__}, expected ProbMap")
            tv.require_same_geometry(p, "prediction and transformed input")
            q = apply_inv_geom(t, p)
            v.require_same_geometry(q, "inverted prediction and original volume")
        except PauseRequested:
            raise
        except Exception as exc:
            raise TtaInferenceError(t.id, str(exc)) from exc
        preds.append(q)
    return preds


# --- manifest -------------------------------------------------------------


def ensemble_to_manifest(e: TtaEnsemble) -> list[dict]:
    return [
        {
            "id": t.id,
            "flip_axes": list(t.flip_axes),
            "rot90_k": t.rot90_k,
            "transpose_yx": t.transpose_yx,
            "intensity_op": t.intensity_op.kind,
            "params": t.intensity_op.params(),
            "seed": t.seed,
        }
        for t in e.transforms
    ]


def ensemble_from_manifest(entries: list[dict]) -> TtaEnsemble:
    transforms = []
    for d in entries:
        op = IntensityOp(
            kind=d["intensity_op"],
            gamma=float(d["params"].get("gamma", 1.0)),
            scale=float(d["params"].get("scale", 1.0)),
            shift=float(d["params"].get("shift", 0.0)),
        )
        transforms.append(
            TtaTransform(
                id=int(d["id"]),
                flip_axes=tuple(d["flip_axes"]),
                rot90_k=int(d["rot90_k"]),
                transpose_yx=bool(d["transpose_yx"]),
                intensity_op=op,
                seed=int(d["seed"]),
            )
        )
    return TtaEnsemble(transforms)


def save_ensemble(e: TtaEnsemble, path) -> None:
    Path(path).write_text(json.dumps(ensemble_to_manifest(e), sort_keys=True, indent=2) + "\n")


def load_ensemble(path) -> TtaEnsemble:
    return ensemble_from_manifest(json.loads(Path(path).read_text()))
