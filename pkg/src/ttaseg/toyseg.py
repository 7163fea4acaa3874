"""Trainable voxelwise logistic segmenter and the warm-restart LR schedule.

Stands in for a segmentation network so the studies run on a desk: six
hand-built features per voxel (raw intensity, two box-smoothed intensities,
squared intensity, normalized z position, bias) feed a logistic readout
trained with soft-target cross-entropy by full-batch gradient descent under
cosine annealing with warm restarts. Balanced fg/bg voxel samples are drawn
once per training call, per case, with a seeded generator; everything is
bit-reproducible for a fixed (cases, schedule, seed).

Also defines the file contract for swapping in an out-of-process model:
`ExternalSegmenter` writes job inputs and raises PredictionsPending until
the external process has written matching predictions.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.special import expit

from .exceptions import GeometryError, PauseRequested, ValidationError
from .util import stable_seed
from .volcore import Mask, ProbMap, Volume, load_svol, save_svol

FEATURE_NAMES = ("intensity", "smooth_r1", "smooth_r2", "intensity_sq", "z_norm", "bias")


# --- schedule ---------------------------------------------------------------


@dataclass(frozen=True)
class RestartSchedule:
    """Cosine annealing with warm restarts; cycle i lasts t0 * t_mult**i epochs."""

    eta_max: float = 1.5
    eta_min: float = 0.01
    t0: int = 20
    t_mult: int = 2
    total_cycles: int = 3

    def __post_init__(self):
        if not 0.0 < self.eta_min < self.eta_max:
            raise ValueError("need 0 < eta_min < eta_max")
        if self.t0 < 1 or self.t_mult < 1 or self.total_cycles < 0:
            raise ValueError("t0 >= 1, t_mult >= 1, total_cycles >= 0")

    @property
    def total_epochs(self) -> int:
        return sum(self.t0 * self.t_mult**i for i in range(self.total_cycles))

    def to_dict(self) -> dict:
        return {
            "eta_max": self.eta_max,
            "eta_min": self.eta_min,
            "t0": self.t0,
            "t_mult": self.t_mult,
            "total_cycles": self.total_cycles,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RestartSchedule":
        return cls(**d)


def lr_at(sched: RestartSchedule, epoch: int) -> float:
    """eta_min + (eta_max - eta_min) * (1 + cos(pi * t_cur / t_i)) / 2."""
    if epoch < 0 or epoch >= sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside schedule of {sched.total_epochs} epochs")
    t_cur = epoch
    t_i = sched.t0
    while t_cur >= t_i:
        t_cur -= t_i
        t_i *= sched.t_mult
    return sched.eta_min + 0.5 * (sched.eta_max - sched.eta_min) * (1.0 + math.cos(math.pi * t_cur / t_i))


# --- features and loss --------------------------------------------------------


@dataclass(frozen=True)
class ToyConfig:
    samples_per_class: int = 1500
    smooth_radii: tuple[int, int] = (1, 2)
    prob_eps: float = 1e-6

    def to_dict(self) -> dict:
        return {
            "samples_per_class": self.samples_per_class,
            "smooth_radii": list(self.smooth_radii),
            "prob_eps": self.prob_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyConfig":
        return cls(
            samples_per_class=d["samples_per_class"],
            smooth_radii=tuple(d["smooth_radii"]),
            prob_eps=d["prob_eps"],
        )


def volume_features(v: Volume, radii: tuple[int, int] = (1, 2)) -> np.ndarray:
    """(n_voxels, 6) float64 feature matrix in z-major voxel order."""
    inten = v.data.astype(np.float64)
    s1 = uniform_filter(inten, size=2 * radii[0] + 1, mode="nearest")
    s2 = uniform_filter(inten, size=2 * radii[1] + 1, mode="nearest")
    nz = v.nz
    z = np.arange(nz, dtype=np.float64) / max(nz - 1, 1)
    zvol = np.broadcast_to(z[:, None, None], v.shape)
    cols = [inten, s1, s2, inten**2, zvol, np.ones(v.shape)]
    return np.stack([c.ravel() for c in cols], axis=1)


def loss_and_grad(w: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Mean soft-target cross-entropy of sigmoid(X w) and its gradient."""
    z = X @ w
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    grad = X.T @ (expit(z) - y) / len(y)
    return loss, grad


def _label_array(label) -> np.ndarray:
    if isinstance(label, Mask):
        return label.data.astype(np.float64)
    return label.data.astype(np.float64)


@dataclass
class TrainingCase:
    """A volume with a hard or soft label on the same grid."""

    case_id: str
    volume: Volume
    label: ProbMap | Mask

    def __post_init__(self):
        if not isinstance(self.label, (ProbMap, Mask)):
            raise ValidationError(f"case {self.case_id}: label must be a ProbMap or Mask")
        self.volume.require_same_geometry(self.label, f"case {self.case_id} volume and label")


def _sample_matrix(cases: list[TrainingCase], config: ToyConfig, seed: int):
    """Balanced per-case fg/bg draws (fg: label >= 0.5), with replacement.

    Each case draws from its own stream keyed by (seed, case_id), so a case
    contributes the same rows regardless of which other cases accompany it;
    training sets that share cases differ only by the added rows."""
    if not cases:
        raise ValidationError("no training cases")
    xs, ys = [], []
    n = config.samples_per_class
    for case in sorted(cases, key=lambda c: c.case_id):
        rng = np.random.default_rng(stable_seed(seed, case.case_id))
        lab = _label_array(case.label).ravel()
        feats = volume_features(case.volume, config.smooth_radii)
        fg = np.flatnonzero(lab >= 0.5)
        bg = np.flatnonzero(lab < 0.5)
        if len(fg) and len(bg):
            idx = np.concatenate([rng.choice(fg, size=n), rng.choice(bg, size=n)])
        else:
            pool = fg if len(fg) else bg
            idx = rng.choice(pool, size=2 * n)
        xs.append(feats[idx])
        ys.append(lab[idx])
    return np.concatenate(xs), np.concatenate(ys)


def _descend(w0, X, y, sched: RestartSchedule):
    w = w0.copy()
    for epoch in range(sched.total_epochs):
        _, grad = loss_and_grad(w, X, y)
        w -= lr_at(sched, epoch) * grad
    return w


class ToySegmenter:
    """Logistic readout over the fixed feature set; see module docstring."""

    def __init__(self, weights, feat_mean, feat_std, config: ToyConfig = ToyConfig()):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.feat_mean = np.asarray(feat_mean, dtype=np.float64)
        self.feat_std = np.asarray(feat_std, dtype=np.float64)
        self.config = config
        k = len(FEATURE_NAMES)
        if self.weights.shape != (k,) or self.feat_mean.shape != (k,) or self.feat_std.shape != (k,):
            raise ValueError(f"model parameters must have shape ({k},)")

    # -- training --

    @classmethod
    def train(cls, cases: list[TrainingCase], sched: RestartSchedule, seed: int,
              config: ToyConfig = ToyConfig()) -> "ToySegmenter":
        """Fresh model: zero-init weights, feature stats from this sample."""
        X, y = _sample_matrix(cases, config, seed)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        mean[-1], std[-1] = 0.0, 1.0  # bias column exempt from standardization
        std = np.where(std < 1e-12, 1.0, std)
        Xs = (X - mean) / std
        w = _descend(np.zeros(len(FEATURE_NAMES)), Xs, y, sched)
        return cls(w, mean, std, config)

    def fine_tune(self, cases: list[TrainingCase], sched: RestartSchedule, seed: int) -> "ToySegmenter":
        """Continue from current weights; feature stats are kept, not refit."""
        X, y = _sample_matrix(cases, self.config, seed)
        Xs = (X - self.feat_mean) / self.feat_std
        w = _descend(self.weights, Xs, y, sched)
        return ToySegmenter(w, self.feat_mean, self.feat_std, self.config)

    # -- inference --

    def predict_soft(self, v: Volume) -> ProbMap:
        X = volume_features(v, self.config.smooth_radii)
        z = ((X - self.feat_mean) / self.feat_std) @ self.weights
        p = expit(z).reshape(v.shape)
        eps = self.config.prob_eps
        return ProbMap(np.clip(p, eps, 1.0 - eps).astype(np.float32), v.spacing_mm)

    # -- persistence --

    def to_dict(self) -> dict:
        return {
            "format": "toyseg-logistic-v1",
            "feature_names": list(FEATURE_NAMES),
            "weights": [float(w) for w in self.weights],
            "feat_mean": [float(m) for m in self.feat_mean],
            "feat_std": [float(s) for s in self.feat_std],
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToySegmenter":
        if d.get("format") != "toyseg-logistic-v1":
            raise ValidationError(f"unknown model format {d.get('format')!r}")
        return cls(
            [float(w) for w in d["weights"]],
            [float(m) for m in d["feat_mean"]],
            [float(s) for s in d["feat_std"]],
            ToyConfig.from_dict(d["config"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ToySegmenter":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --- external segmenter file contract ----------------------------------------


class PredictionsPending(PauseRequested):
    """Inputs are on disk but the external process has not answered yet."""

    def __init__(self, job_dir, missing_ids):
        self.job_dir = Path(job_dir)
        self.missing_ids = sorted(missing_ids)
        super().__init__(
            f"{len(self.missing_ids)} prediction(s) missing under {self.job_dir}/preds; "
            f"first missing id: {self.missing_ids[0]}"
        )


def volume_digest(v: Volume) -> str:
    """Content address for one volume: geometry header plus payload bytes."""
    h = hashlib.sha256()
    h.update(json.dumps({"shape": list(v.shape), "spacing_mm": list(v.spacing_mm)},
                        sort_keys=True).encode())
    h.update(np.ascontiguousarray(v.data, dtype="<f4").tobytes(order="C"))
    return h.hexdigest()[:16]


class ExternalSegmenter:
    """Swaps the toy model for any out-of-process segmenter via svol files.

    predict_soft(v) writes `inputs/<digest>.svol` (once) and expects the
    external process to leave `preds/<digest>.svol` (kind prob, same
    geometry). Until it does, PredictionsPending is raised, which pipelines
    surface as a pause rather than a failure.
    """

    def __init__(self, job_dir):
        self.job_dir = Path(job_dir)
        (self.job_dir / "inputs").mkdir(parents=True, exist_ok=True)
        (self.job_dir / "preds").mkdir(parents=True, exist_ok=True)

    def _manifest_path(self) -> Path:
        return self.job_dir / "manifest.json"

    def _register(self, vid: str) -> None:
        path = self._manifest_path()
        manifest = json.loads(path.read_text()) if path.exists() else {"inputs": []}
        if vid not in manifest["inputs"]:
            manifest["inputs"] = sorted(manifest["inputs"] + [vid])
            path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")

    def predict_soft(self, v: Volume) -> ProbMap:
        vid = volume_digest(v)
        in_path = self.job_dir / "inputs" / f"{vid}.svol"
        if not in_path.exists():
            save_svol(v, in_path)
            self._register(vid)
        pred_path = self.job_dir / "preds" / f"{vid}.svol"
        if not pred_path.exists():
            raise PredictionsPending(self.job_dir, [vid])
        pred = load_svol(pred_path)
        if not isinstance(pred, ProbMap):
            raise ValidationError(f"{pred_path} is kind {pred.kind!r}, expected prob")
        if not v.same_geometry(pred):
            raise GeometryError(
                f"{pred_path}: geometry {pred.shape}@{pred.spacing_mm} does not match "
                f"input {v.shape}@{v.spacing_mm}"
            )
        return pred


def pending_inputs(job_dir) -> list[str]:
    """Input ids that still lack a prediction file."""
    job_dir = Path(job_dir)
    out = []
    for in_path in sorted((job_dir / "inputs").glob("*.svol")):
        if not (job_dir / "preds" / in_path.name).exists():
            out.append(in_path.stem)
    return out


def answer_pending(job_dir, segmenter) -> int:
    """Stand-in for the external process: answer every open job with
    `segmenter`. Returns the number of predictions written."""
    job_dir = Path(job_dir)
    n = 0
    for vid in pending_inputs(job_dir):
        vol = load_svol(job_dir / "inputs" / f"{vid}.svol")
        save_svol(segmenter.predict_soft(vol), job_dir / "preds" / f"{vid}.svol")
        n += 1
    return n
