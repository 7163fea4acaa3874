"""Case curation: active-learning picks, auto-thresholded self-training
selection, border-slice correction, pseudo-label construction, and train-set
assembly.

Selection semantics: cases are ranked worst-first by estimated Dice; the K
worst go to annotation (AL), and of the remainder those at or above the
auto threshold become pseudo-labeled self-training cases. The threshold is
the n-th largest estimated score with n = number of labeled cases after AL,
so the pseudo-label count is at least n whenever the pool allows it (ties
at the threshold all pass).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ValidationError
from .qe import QualityReport, rank_by_quality
from .util import write_csv, read_csv
from .volcore import Mask, ProbMap

LABEL_MANUAL_HARD = "manual-hard"
LABEL_PSEUDO_SOFT = "pseudo-soft"
LABEL_NONE = "none"
LABEL_KINDS = (LABEL_MANUAL_HARD, LABEL_PSEUDO_SOFT, LABEL_NONE)

PSEUDO_PLAIN_SOFT = "plain-soft"
PSEUDO_TTA_MEDIAN = "tta-median-soft"
PSEUDO_MODES = (PSEUDO_PLAIN_SOFT, PSEUDO_TTA_MEDIAN)

DEFAULT_ST_FLOOR = 0.85


@dataclass
class CaseRecord:
    """One case in a train set; refs are paths relative to the manifest."""

    case_id: str
    volume_ref: str
    label_ref: str | None = None
    label_kind: str = LABEL_NONE
    border: tuple[int, int] | None = None
    domain_tag: str = ""

    def __post_init__(self):
        if not self.case_id:
            raise ValidationError("case_id must be non-empty")
        if self.label_kind not in LABEL_KINDS:
            raise ValidationError(f"label_kind must be one of {LABEL_KINDS}, got {self.label_kind!r}")
        if (self.label_ref is None) != (self.label_kind == LABEL_NONE):
            raise ValidationError(
                f"case {self.case_id}: label_ref and label_kind disagree "
                f"({self.label_ref!r} vs {self.label_kind!r})"
            )
        if self.border is not None:
            lo, hi = int(self.border[0]), int(self.border[1])
            if lo < 0 or hi < lo:
                raise ValidationError(f"case {self.case_id}: border must satisfy 0 <= lo <= hi")
            self.border = (lo, hi)

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "volume_ref": self.volume_ref,
            "label_ref": self.label_ref,
            "label_kind": self.label_kind,
            "border": None if self.border is None else list(self.border),
            "domain_tag": self.domain_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaseRecord":
        return cls(
            case_id=d["case_id"],
            volume_ref=d["volume_ref"],
            label_ref=d["label_ref"],
            label_kind=d["label_kind"],
            border=None if d["border"] is None else tuple(d["border"]),
            domain_tag=d.get("domain_tag", ""),
        )


# --- selection ---------------------------------------------------------------


def select_al(ranked_ids: list[str], k: int) -> list[str]:
    """The k worst-scored cases, in rank order."""
    if k < 0 or k > len(ranked_ids):
        raise ValueError(f"k must be in [0, {len(ranked_ids)}], got {k}")
    return list(ranked_ids[:k])


def auto_threshold(reports: list[QualityReport], n_labeled: int, floor: float | None = None) -> float:
    """The n_labeled-th largest estimated score (lowest score if the pool is
    smaller), optionally raised to an absolute floor."""
    if not reports:
        raise ValueError("auto_threshold needs at least one report")
    if n_labeled < 1:
        raise ValueError(f"n_labeled must be >= 1, got {n_labeled}")
    scores = sorted((r.estimated_dice for r in reports), reverse=True)
    thr = scores[n_labeled - 1] if n_labeled <= len(scores) else scores[-1]
    if floor is not None:
        thr = max(thr, float(floor))
    return float(thr)


def select_st(reports: list[QualityReport], al_ids: list[str], threshold: float) -> list[str]:
    """Non-AL cases scoring at or above the threshold, worst-first order."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    al = set(al_ids)
    by_id = {r.case_id: r for r in reports}
    return [
        cid for cid in rank_by_quality(reports)
        if cid not in al and by_id[cid].estimated_dice >= threshold
    ]


@dataclass
class SelectionPlan:
    """Result of one combined selection pass over a candidate pool."""

    al_ids: list[str]
    st_ids: list[str]
    excluded_ids: list[str]
    threshold_used: float
    k_requested: int
    n_labeled: int
    floor: float | None = None
    meets_st_quota: bool = True
    selection: str = "quality"
    scores: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        parts = [self.al_ids, self.st_ids, self.excluded_ids]
        all_ids = [cid for part in parts for cid in part]
        if len(set(all_ids)) != len(all_ids):
            raise ValidationError("selection plan parts overlap")
        if len(self.al_ids) != self.k_requested:
            raise ValidationError(
                f"plan has {len(self.al_ids)} AL cases but k_requested={self.k_requested}"
            )

    def to_dict(self) -> dict:
        return {
            "al_ids": self.al_ids,
            "st_ids": self.st_ids,
            "excluded_ids": self.excluded_ids,
            "threshold_used": self.threshold_used,
            "k_requested": self.k_requested,
            "n_labeled": self.n_labeled,
            "floor": self.floor,
            "meets_st_quota": self.meets_st_quota,
            "selection": self.selection,
            "scores": self.scores,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionPlan":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SelectionPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_selection_plan(
    reports: list[QualityReport],
    k: int,
    n_labeled: int,
    floor: float | None = None,
    st_enabled: bool = True,
) -> SelectionPlan:
    """Rank, pick K for annotation, auto-threshold the rest for pseudo-labels."""
    ranked = rank_by_quality(reports)
    al_ids = select_al(ranked, k)
    rest = [r for r in reports if r.case_id not in set(al_ids)]
    if st_enabled and rest:
        threshold = auto_threshold(rest, n_labeled, floor=floor)
        st_ids = select_st(reports, al_ids, threshold)
    else:
        threshold = 1.0
        st_ids = []
    st_set = set(st_ids)
    excluded = [cid for cid in ranked if cid not in set(al_ids) and cid not in st_set]
    quota = min(n_labeled, len(rest))
    return SelectionPlan(
        al_ids=al_ids,
        st_ids=st_ids,
        excluded_ids=excluded,
        threshold_used=threshold,
        k_requested=k,
        n_labeled=n_labeled,
        floor=floor,
        meets_st_quota=(len(st_ids) >= quota) if st_enabled else True,
        selection="quality",
        scores={r.case_id: r.estimated_dice for r in reports},
    )


def make_random_plan(pool_ids: list[str], k: int, n_labeled: int, seed: int) -> SelectionPlan:
    """Control arm: K uniform picks, no pseudo-labels."""
    ids = sorted(pool_ids)
    if k < 0 or k > len(ids):
        raise ValueError(f"k must be in [0, {len(ids)}], got {k}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    al_ids = [ids[i] for i in order[:k]]
    excluded = [cid for cid in ids if cid not in set(al_ids)]
    return SelectionPlan(
        al_ids=al_ids,
        st_ids=[],
        excluded_ids=excluded,
        threshold_used=1.0,
        k_requested=k,
        n_labeled=n_labeled,
        selection="random",
    )


# --- labels ---------------------------------------------------------------


def apply_border_correction(grid, border: tuple[int, int]):
    """Zero everything outside the closed slice range [z_lo, z_hi]."""
    lo, hi = int(border[0]), int(border[1])
    if lo < 0 or hi < lo or hi >= grid.nz:
        raise ValueError(f"border {border!r} out of range for nz={grid.nz}")
    out = grid.data.copy()
    out[:lo] = 0
    out[hi + 1:] = 0
    return type(grid)(out, grid.spacing_mm)


def build_pseudo_label(case_id: str, mode: str, preds, sm, border=None) -> ProbMap:
    """Soft pseudo-label for one case: the identity member's probabilities
    (plain-soft) or the ensemble median (tta-median-soft), border-corrected
    when border slices are known."""
    if mode == PSEUDO_PLAIN_SOFT:
        if not preds:
            raise ValueError(f"case {case_id}: plain-soft needs the identity prediction")
        lab = preds[0]
    elif mode == PSEUDO_TTA_MEDIAN:
        lab = sm.prob
    else:
        raise ValueError(f"case {case_id}: unknown pseudo-label mode {mode!r}")
    if border is not None:
        return apply_border_correction(lab, border)
    return ProbMap(lab.data.copy(), lab.spacing_mm)


# --- train sets --------------------------------------------------------------


@dataclass
class TrainSet:
    """D_base u D_AL u D_ST with per-part label-kind contracts."""

    base: list[CaseRecord]
    al: list[CaseRecord]
    st: list[CaseRecord]

    def __post_init__(self):
        ids = [c.case_id for c in self.all_cases()]
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            raise ValidationError(f"duplicate case ids across train-set parts: {dup}")
        for c in self.base:
            if c.label_kind != LABEL_MANUAL_HARD:
                raise ValidationError(f"base case {c.case_id} must be manual-hard, got {c.label_kind}")
        for c in self.al:
            if c.label_kind != LABEL_MANUAL_HARD:
                raise ValidationError(f"AL case {c.case_id} must be manual-hard, got {c.label_kind}")
        for c in self.st:
            if c.label_kind != LABEL_PSEUDO_SOFT:
                raise ValidationError(f"ST case {c.case_id} must be pseudo-soft, got {c.label_kind}")

    def all_cases(self) -> list[CaseRecord]:
        return list(self.base) + list(self.al) + list(self.st)

    def case_ids(self) -> list[str]:
        return [c.case_id for c in self.all_cases()]

    def to_manifest(self) -> dict:
        return {
            "base": [c.to_dict() for c in self.base],
            "al": [c.to_dict() for c in self.al],
            "st": [c.to_dict() for c in self.st],
        }

    @classmethod
    def from_manifest(cls, d: dict) -> "TrainSet":
        return cls(
            base=[CaseRecord.from_dict(c) for c in d["base"]],
            al=[CaseRecord.from_dict(c) for c in d["al"]],
            st=[CaseRecord.from_dict(c) for c in d["st"]],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_manifest(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "TrainSet":
        return cls.from_manifest(json.loads(Path(path).read_text()))


def assemble_trainset(base: list[CaseRecord], al: list[CaseRecord], st: list[CaseRecord]) -> TrainSet:
    return TrainSet(base=list(base), al=list(al), st=list(st))


# --- worklists -----------------------------------------------------------------

_WORKLIST_HEADER = ["case_id", "volume_ref", "estimated_dice"]


def write_worklist(path, rows: list[tuple[str, str, float | None]]) -> None:
    """Annotation queue handed to a human or to the simulated oracle."""
    write_csv(path, _WORKLIST_HEADER, rows)


def read_worklist(path) -> list[tuple[str, str, float | None]]:
    header, rows = read_csv(path)
    if header != _WORKLIST_HEADER:
        raise ValueError(f"unexpected worklist header in {path}: {header}")
    return [(r[0], r[1], float(r[2]) if r[2] != "" else None) for r in rows]
