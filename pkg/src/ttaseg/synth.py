"""Synthetic 3D phantoms with controllable variability and domain shift,
plus the simulated annotation oracle and a prediction corruptor.

A phantom is a union of 1..n axis-aligned ellipsoids with per-case drawn
foreground/background intensities, additive Gaussian noise, and a smooth
random bias field. Two domain shifts are available: contrast-shift
(intensities compressed toward an off-center pivot, a stand-in for an
acquisition change) and crop-fov (the z field of view is truncated, which
may cut the structure). Everything is a pure function of (spec, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion, gaussian_filter, map_coordinates

from .exceptions import ValidationError
from .util import stable_seed
from .volcore import Mask, ProbMap, Volume, load_svol, save_svol

SHIFT_KINDS = ("none", "contrast-shift", "crop-fov")
VARIABILITY = ("low", "high")

# structure placement ranges by variability: (center_frac, radius_frac)
_RANGES = {
    "low": ((0.30, 0.70), (0.16, 0.26)),
    "high": ((0.22, 0.78), (0.08, 0.30)),
}


class GenerationError(ValueError):
    """The drawn phantom is unusable (e.g. structure left the grid)."""


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (48, 48, 48)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_structures: tuple[int, int] = (1, 1)
    fg_intensity: tuple[float, float] = (0.64, 0.06)  # per-case (mean, std) draw
    bg_intensity: tuple[float, float] = (0.32, 0.035)
    fg_alt_intensity: tuple[float, float] | None = None  # optional hard contrast mode
    fg_alt_prob: float = 0.0
    noise_sigma: float = 0.11
    bias_field_amp: float = 0.05
    variability: str = "low"
    shift: str = "none"
    shift_magnitude: float = 0.0

    def __post_init__(self):
        if self.variability not in VARIABILITY:
            raise ValueError(f"variability must be one of {VARIABILITY}")
        if self.shift not in SHIFT_KINDS:
            raise ValueError(f"shift must be one of {SHIFT_KINDS}")
        if not 0.0 <= self.fg_alt_prob <= 1.0:
            raise ValueError("fg_alt_prob must be in [0, 1]")
        if self.fg_alt_prob > 0.0 and self.fg_alt_intensity is None:
            raise ValueError("fg_alt_prob set without fg_alt_intensity")
        lo, hi = self.n_structures
        if lo < 1 or hi < lo:
            raise ValueError("n_structures must satisfy 1 <= lo <= hi")

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "spacing_mm": list(self.spacing_mm),
            "n_structures": list(self.n_structures),
            "fg_intensity": list(self.fg_intensity),
            "bg_intensity": list(self.bg_intensity),
            "fg_alt_intensity": None if self.fg_alt_intensity is None else list(self.fg_alt_intensity),
            "fg_alt_prob": self.fg_alt_prob,
            "noise_sigma": self.noise_sigma,
            "bias_field_amp": self.bias_field_amp,
            "variability": self.variability,
            "shift": self.shift,
            "shift_magnitude": self.shift_magnitude,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(
            shape=tuple(d["shape"]),
            spacing_mm=tuple(d["spacing_mm"]),
            n_structures=tuple(d["n_structures"]),
            fg_intensity=tuple(d["fg_intensity"]),
            bg_intensity=tuple(d["bg_intensity"]),
            fg_alt_intensity=None if d["fg_alt_intensity"] is None else tuple(d["fg_alt_intensity"]),
            fg_alt_prob=d["fg_alt_prob"],
            noise_sigma=d["noise_sigma"],
            bias_field_amp=d["bias_field_amp"],
            variability=d["variability"],
            shift=d["shift"],
            shift_magnitude=d["shift_magnitude"],
        )


def low_variability_spec(**overrides) -> PhantomSpec:
    return replace(PhantomSpec(), **overrides) if overrides else PhantomSpec()


def high_variability_spec(**overrides) -> PhantomSpec:
    base = PhantomSpec(
        n_structures=(1, 3),
        fg_intensity=(0.85, 0.04),
        bg_intensity=(0.25, 0.03),
        fg_alt_intensity=(0.52, 0.03),
        fg_alt_prob=0.25,
        noise_sigma=0.06,
        bias_field_amp=0.04,
        variability="high",
    )
    return replace(base, **overrides) if overrides else base


def border_of(truth: Mask) -> tuple[int, int] | None:
    """Closed z-range [lo, hi] of the foreground; None for an empty mask."""
    zs = np.flatnonzero(truth.data.any(axis=(1, 2)))
    if len(zs) == 0:
        return None
    return int(zs[0]), int(zs[-1])


def _smooth_field(rng: np.random.Generator, shape) -> np.ndarray:
    """Trilinear upsample of a seeded 3x3x3 grid, scaled to max |.| = 1."""
    coarse = rng.normal(size=(3, 3, 3))
    grids = np.meshgrid(
        *(np.linspace(0.0, 2.0, n) for n in shape), indexing="ij"
    )
    field = map_coordinates(coarse, np.stack([g.ravel() for g in grids]), order=1, mode="nearest")
    field = field.reshape(shape)
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def gen_phantom(spec: PhantomSpec, seed: int):
    """Returns (volume, truth mask, (z_lo, z_hi)) for this spec and seed."""
    rng = np.random.default_rng(seed)
    nz, ny, nx = spec.shape
    c_range, r_range = _RANGES[spec.variability]

    n = int(rng.integers(spec.n_structures[0], spec.n_structures[1] + 1))
    mask = np.zeros(spec.shape, dtype=bool)
    zz, yy, xx = np.ogrid[:nz, :ny, :nx]
    for _ in range(n):
        cz, cy, cx = (rng.uniform(*c_range) * d for d in (nz, ny, nx))
        rz, ry, rx = (max(rng.uniform(*r_range) * d, 1.5) for d in (nz, ny, nx))
        mask |= ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

    use_alt = spec.fg_alt_prob > 0.0 and rng.random() < spec.fg_alt_prob
    fg_mean, fg_std = spec.fg_alt_intensity if use_alt else spec.fg_intensity
    fg = rng.normal(fg_mean, fg_std)
    bg = rng.normal(*spec.bg_intensity)

    data = np.where(mask, fg, bg)
    if spec.bias_field_amp > 0.0:
        data = data + spec.bias_field_amp * _smooth_field(rng, spec.shape)
    if spec.noise_sigma > 0.0:
        data = data + rng.normal(0.0, spec.noise_sigma, size=spec.shape)

    if spec.shift == "contrast-shift" and spec.shift_magnitude > 0.0:
        # compress intensities toward an off-center pivot: lower contrast,
        # shifted operating point
        pivot = 0.35
        data = pivot + (data - pivot) * (1.0 - 0.6 * spec.shift_magnitude)
    elif spec.shift == "crop-fov" and spec.shift_magnitude > 0.0:
        keep = max(3, int(round(nz * (1.0 - 0.5 * spec.shift_magnitude))))
        data = data[:keep]
        mask = mask[:keep]

    if not mask.any():
        raise GenerationError(f"seed {seed}: structure fell outside the field of view")

    truth = Mask(mask, spec.spacing_mm)
    return Volume(data.astype(np.float32), spec.spacing_mm), truth, border_of(truth)


# --- simulated annotator --------------------------------------------------------


NOISE_KINDS = ("none", "boundary-jitter")


@dataclass(frozen=True)
class OracleConfig:
    label_noise: str = "none"
    jitter_voxels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.label_noise not in NOISE_KINDS:
            raise ValueError(f"label_noise must be one of {NOISE_KINDS}")
        if self.jitter_voxels < 1:
            raise ValueError("jitter_voxels must be >= 1")

    def to_dict(self) -> dict:
        return {"label_noise": self.label_noise, "jitter_voxels": self.jitter_voxels, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "OracleConfig":
        return cls(**d)


def jitter_mask(truth: Mask, voxels: int, rng: np.random.Generator) -> Mask:
    """Flip each voxel in the boundary band (dilation XOR erosion of width
    `voxels`) with p = 0.5; voxels outside the band are untouched."""
    m = truth.data
    band = binary_dilation(m, iterations=voxels) ^ binary_erosion(m, iterations=voxels)
    flips = band & (rng.random(m.shape) < 0.5)
    return Mask(m ^ flips, truth.spacing_mm)


class AnnotationOracle:
    """Stands in for the human annotator in desk-scale runs.

    `truths` is any mapping from case id to the ground-truth Mask; unknown
    ids raise KeyError. With boundary-jitter noise the returned annotation
    deviates from the truth only within the configured boundary band,
    deterministically per (oracle seed, case id).
    """

    def __init__(self, truths, config: OracleConfig = OracleConfig()):
        self._truths = truths
        self.config = config

    def annotate(self, case_id: str) -> Mask:
        truth = self._truths[case_id]
        if self.config.label_noise == "none":
            return truth
        rng = np.random.default_rng(stable_seed(self.config.seed, "annotate", case_id))
        return jitter_mask(truth, self.config.jitter_voxels, rng)

    def border_slices(self, case_id: str) -> tuple[int, int] | None:
        return border_of(self._truths[case_id])


# --- prediction corruption -------------------------------------------------------


def _shift_bool(m: np.ndarray, offsets) -> np.ndarray:
    out = np.zeros_like(m)
    src = []
    dst = []
    for off, size in zip(offsets, m.shape):
        off = int(off)
        if abs(off) >= size:
            return out
        if off >= 0:
            src.append(slice(0, size - off))
            dst.append(slice(off, size))
        else:
            src.append(slice(-off, size))
            dst.append(slice(0, size + off))
    out[tuple(dst)] = m[tuple(src)]
    return out


def _ball(shape, center, radius) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    return (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2 <= radius**2


def corrupt_prediction(truth: Mask, severity: float, seed: int) -> ProbMap:
    """Severity-scaled plausible error model applied to the truth.

    severity 0 returns the truth unchanged (as probabilities); rising
    severity compounds translation, over/under-segmentation, dropped
    components, a spurious component, and boundary blur.
    """
    s = float(severity)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"severity must be in [0, 1], got {severity!r}")
    if s == 0.0:
        return ProbMap(truth.data.astype(np.float32), truth.spacing_mm)

    rng = np.random.default_rng(seed)
    m = truth.data.copy()

    max_shift = int(round(5 * s))
    if max_shift:
        m = _shift_bool(m, rng.integers(-max_shift, max_shift + 1, size=3))

    iters = int(round(2 * s))
    if iters:
        if rng.random() < 0.5:
            m = binary_dilation(m, iterations=iters)
        else:
            m = binary_erosion(m, iterations=iters)

    for _ in range(int(round(2 * s))):
        fg = np.flatnonzero(m)
        if len(fg) == 0:
            break
        center = np.unravel_index(fg[int(rng.integers(len(fg)))], m.shape)
        m &= ~_ball(m.shape, center, 2 + 5 * s)

    if rng.random() < 0.7 * s:
        center = [int(rng.integers(d)) for d in m.shape]
        m |= _ball(m.shape, center, 2 + 4 * s)

    soft = m.astype(np.float64)
    if s > 0.0:
        soft = gaussian_filter(soft, sigma=1.0 * s)
    return ProbMap(np.clip(soft, 0.0, 1.0).astype(np.float32), truth.spacing_mm)


# --- corpora ------------------------------------------------------------------------


@dataclass
class CorpusCase:
    case_id: str
    domain_tag: str
    seed: int
    spec: PhantomSpec
    volume_path: str  # relative to the corpus root
    truth_path: str
    border: tuple[int, int]

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "domain_tag": self.domain_tag,
            "seed": self.seed,
            "spec": self.spec.to_dict(),
            "volume_path": self.volume_path,
            "truth_path": self.truth_path,
            "border": list(self.border),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusCase":
        return cls(
            case_id=d["case_id"],
            domain_tag=d["domain_tag"],
            seed=d["seed"],
            spec=PhantomSpec.from_dict(d["spec"]),
            volume_path=d["volume_path"],
            truth_path=d["truth_path"],
            border=tuple(d["border"]),
        )


class _TruthView:
    def __init__(self, corpus: "Corpus"):
        self._corpus = corpus

    def __getitem__(self, case_id: str) -> Mask:
        return self._corpus.truth(case_id)


class Corpus:
    """A generated case collection addressed by id; all paths stay relative."""

    MANIFEST = "manifest.json"

    def __init__(self, root, seed: int, cases: dict[str, CorpusCase]):
        self.root = Path(root)
        self.seed = seed
        self.cases = dict(sorted(cases.items()))

    def ids(self, tag: str | None = None) -> list[str]:
        if tag is None:
            return list(self.cases)
        return [cid for cid, c in self.cases.items() if c.domain_tag == tag]

    def case(self, case_id: str) -> CorpusCase:
        if case_id not in self.cases:
            raise KeyError(f"unknown case id {case_id!r}")
        return self.cases[case_id]

    def volume(self, case_id: str) -> Volume:
        vol = load_svol(self.root / self.case(case_id).volume_path)
        if not isinstance(vol, Volume):
            raise ValidationError(f"{case_id}: volume file has kind {vol.kind!r}")
        return vol

    def truth(self, case_id: str) -> Mask:
        mask = load_svol(self.root / self.case(case_id).truth_path)
        if not isinstance(mask, Mask):
            raise ValidationError(f"{case_id}: truth file has kind {mask.kind!r}")
        return mask

    def truths(self) -> _TruthView:
        return _TruthView(self)

    def save_manifest(self) -> None:
        manifest = {
            "seed": self.seed,
            "cases": {cid: c.to_dict() for cid, c in self.cases.items()},
        }
        (self.root / self.MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, root) -> "Corpus":
        root = Path(root)
        manifest = json.loads((root / cls.MANIFEST).read_text())
        cases = {cid: CorpusCase.from_dict(d) for cid, d in manifest["cases"].items()}
        return cls(root, manifest["seed"], cases)


def generate_corpus(root, groups: list[tuple[str, PhantomSpec, int]], seed: int) -> Corpus:
    """groups: (domain_tag, spec, count) triples; case seeds derive from
    (corpus seed, tag, index) so corpora regenerate bit-identically."""
    root = Path(root)
    (root / "cases").mkdir(parents=True, exist_ok=True)
    cases: dict[str, CorpusCase] = {}
    for tag, spec, count in groups:
        for i in range(count):
            cid = f"{tag}-{i:03d}"
            if cid in cases:
                raise ValueError(f"duplicate case id {cid}")
            case_seed = stable_seed(seed, tag, i)
            vol, truth, border = gen_phantom(spec, case_seed)
            vol_path = f"cases/{cid}.vol.svol"
            truth_path = f"cases/{cid}.truth.svol"
            save_svol(vol, root / vol_path)
            save_svol(truth, root / truth_path)
            cases[cid] = CorpusCase(
                case_id=cid,
                domain_tag=tag,
                seed=case_seed,
                spec=spec,
                volume_path=vol_path,
                truth_path=truth_path,
                border=border,
            )
    corpus = Corpus(root, seed, cases)
    corpus.save_manifest()
    return corpus
