"""Median voting over TTA predictions and estimated-Dice quality scoring.

The quality estimate for a case is the agreement between each member's
binarized prediction and the ensemble's median-vote mask, aggregated over
members (mean by default, median optionally). No ground truth involved:
high disagreement between augmented predictions flags low-quality cases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .util import write_csv, read_csv
from .volcore import Mask, ProbMap, binarize, dice

AGGREGATORS = ("mean", "median")
VOTE_THRESHOLD = 0.5


@dataclass
class SoftMedian:
    """Voxelwise median probability map and its binarized mask."""

    prob: ProbMap
    mask: Mask


def median_vote(preds: list[ProbMap]) -> SoftMedian:
    """Voxelwise median across members; even counts take the midpoint.

    The mask is the stored float32 median thresholded at 0.5 (>=), so the
    mask/prob pair is self-consistent by construction.
    """
    if len(preds) < 2:
        raise ValueError(f"median vote needs at least 2 predictions, got {len(preds)}")
    for p in preds[1:]:
        preds[0].require_same_geometry(p, "ensemble predictions")
    stack = np.stack([p.data for p in preds]).astype(np.float64)
    med = np.median(stack, axis=0).astype(np.float32)
    prob = ProbMap(med, preds[0].spacing_mm)
    return SoftMedian(prob=prob, mask=binarize(prob, VOTE_THRESHOLD))


def _aggregate(aggregator: str, vals: list[float]) -> float:
    if aggregator == "mean":
        return float(np.mean(vals))
    return float(np.median(vals))


@dataclass
class QualityReport:
    case_id: str
    estimated_dice: float
    per_aug_dice: list[float]
    aggregator: str
    roi: tuple[int, int] | None
    ensemble_size: int

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if not self.per_aug_dice:
            raise ValueError("per_aug_dice must not be empty")
        if any(not (0.0 <= d <= 1.0) or not math.isfinite(d) for d in self.per_aug_dice):
            raise ValueError("per-augmentation Dice values must lie in [0, 1]")
        want = _aggregate(self.aggregator, self.per_aug_dice)
        if abs(self.estimated_dice - want) > 1e-9:
            raise ValueError(
                f"estimated_dice {self.estimated_dice} does not {self.aggregator}-aggregate "
                f"per_aug_dice (expected {want})"
            )
        if self.roi is not None:
            lo, hi = (int(self.roi[0]), int(self.roi[1]))
            if lo < 0 or hi < lo:
                raise ValueError(f"roi must satisfy 0 <= lo <= hi, got {self.roi!r}")
            self.roi = (lo, hi)
        if self.ensemble_size < len(self.per_aug_dice):
            raise ValueError("ensemble_size smaller than the per-augmentation list")

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "estimated_dice": self.estimated_dice,
            "per_aug_dice": self.per_aug_dice,
            "aggregator": self.aggregator,
            "roi": None if self.roi is None else list(self.roi),
            "ensemble_size": self.ensemble_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QualityReport":
        return cls(
            case_id=d["case_id"],
            estimated_dice=d["estimated_dice"],
            per_aug_dice=list(d["per_aug_dice"]),
            aggregator=d["aggregator"],
            roi=None if d["roi"] is None else tuple(d["roi"]),
            ensemble_size=d["ensemble_size"],
        )


def estimate_quality(
    case_id: str,
    preds: list[ProbMap],
    sm: SoftMedian,
    aggregator: str = "mean",
    roi: tuple[int, int] | None = None,
    include_identity: bool = True,
) -> QualityReport:
    """Per-member Dice against the median mask, aggregated.

    `roi` restricts the comparison to the closed slice range [z_lo, z_hi]
    (border-slice restriction). `include_identity=False` drops member 0
    from the per-augmentation list; the denominator follows.
    """
    if aggregator not in AGGREGATORS:
        raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {aggregator!r}")
    if not preds:
        raise ValueError("no predictions to score")
    for p in preds:
        sm.prob.require_same_geometry(p, "prediction and median")
    zsl = slice(None)
    if roi is not None:
        lo, hi = int(roi[0]), int(roi[1])
        if lo < 0 or hi < lo or hi >= sm.prob.nz:
            raise ValueError(f"roi {roi!r} out of range for nz={sm.prob.nz}")
        zsl = slice(lo, hi + 1)
        roi = (lo, hi)
    scored = preds if include_identity else preds[1:]
    if not scored:
        raise ValueError("nothing left to score after dropping the identity member")
    spacing = sm.prob.spacing_mm
    ref = Mask(sm.mask.data[zsl], spacing)
    per = [
        dice(Mask(p.data[zsl] >= VOTE_THRESHOLD, spacing), ref)
        for p in scored
    ]
    return QualityReport(
        case_id=case_id,
        estimated_dice=_aggregate(aggregator, per),
        per_aug_dice=per,
        aggregator=aggregator,
        roi=roi,
        ensemble_size=len(preds),
    )


def rank_by_quality(reports: list[QualityReport]) -> list[str]:
    """Case ids worst-first: ascending estimated Dice, ties by case id."""
    ids = [r.case_id for r in reports]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate case ids in quality reports")
    return [r.case_id for r in sorted(reports, key=lambda r: (r.estimated_dice, r.case_id))]


# --- persistence -----------------------------------------------------------

_CSV_HEADER = [
    "case_id", "estimated_dice", "aggregator", "roi_lo", "roi_hi",
    "ensemble_size", "per_aug_dice",
]


def write_quality_reports(reports: list[QualityReport], path) -> None:
    rows = []
    for r in reports:
        rows.append([
            r.case_id,
            r.estimated_dice,
            r.aggregator,
            None if r.roi is None else r.roi[0],
            None if r.roi is None else r.roi[1],
            r.ensemble_size,
            ";".join(repr(d) for d in r.per_aug_dice),
        ])
    write_csv(path, _CSV_HEADER, rows)


def read_quality_reports(path) -> list[QualityReport]:
    header, rows = read_csv(path)
    if header != _CSV_HEADER:
        raise ValueError(f"unexpected quality CSV header in {path}: {header}")
    out = []
    for row in rows:
        case_id, est, agg, lo, hi, size, per = row
        out.append(
            QualityReport(
                case_id=case_id,
                estimated_dice=float(est),
                per_aug_dice=[float(v) for v in per.split(";")],
                aggregator=agg,
                roi=None if lo == "" else (int(lo), int(hi)),
                ensemble_size=int(size),
            )
        )
    return out
