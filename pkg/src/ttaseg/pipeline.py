"""One quality-estimation round, staged and resumable.

A round takes a trained segmenter plus a labeled base set and an unlabeled
pool, and produces a fine-tuned student via TTA quality estimation, K-worst
annotation, auto-thresholded pseudo-label selection, optional border-slice
correction, and combined fine-tuning. Every stage writes its artifact into
the round directory and is skipped when the artifact already exists, so an
interrupted run (including a deliberate pause waiting for human annotations)
resumes exactly where it stopped and reruns are byte-identical.

Round directory layout::

    config.json            frozen round inputs; guards against mixed resumes
    ensemble.json          TTA transform manifest
    borders.json           {case_id: [z_lo, z_hi]} when borders are enabled
    qe_reports.csv         per-case quality estimates over the pool
    pseudo/<id>.svol       uncorrected soft pseudo-label source per pool case
    plan.json              selection plan (AL picks, ST picks, threshold)
    worklist.csv           annotation queue for the AL picks
    annotations/<id>.svol  manual labels for the AL picks
    labels/st/<id>.svol    final (border-corrected) pseudo-labels
    trainset.json          train-set manifest; refs relative to this directory
    student.json           the fine-tuned model

All stored paths are relative so a round directory can be moved or compared
bit-for-bit against a sibling run.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .curate import (
    PSEUDO_MODES,
    PSEUDO_TTA_MEDIAN,
    CaseRecord,
    LABEL_MANUAL_HARD,
    LABEL_PSEUDO_SOFT,
    SelectionPlan,
    TrainSet,
    apply_border_correction,
    assemble_trainset,
    build_pseudo_label,
    make_random_plan,
    make_selection_plan,
    write_worklist,
)
from .exceptions import PauseRequested, ValidationError
from .qe import (
    AGGREGATORS,
    VOTE_THRESHOLD,
    QualityReport,
    SoftMedian,
    estimate_quality,
    median_vote,
    read_quality_reports,
    write_quality_reports,
)
from .synth import AnnotationOracle, Corpus, OracleConfig
from .toyseg import RestartSchedule, ToyConfig, ToySegmenter, TrainingCase, volume_digest
from .tta import enumerate_transforms, ensemble_to_manifest, load_ensemble, save_ensemble, tta_infer
from .util import digest_of, read_csv, read_json, write_csv, write_json
from .volcore import Mask, ProbMap, binarize, compute_metrics, load_svol, save_svol

ANNOTATORS = ("oracle", "human")
BORDER_SCOPES = ("all", "st-only")
SELECTIONS = ("quality", "random")

STAGES = (
    "config",
    "ensemble",
    "borders",
    "qe",
    "plan",
    "annotations",
    "labels",
    "trainset",
    "student",
)


class WorklistPending(PauseRequested):
    """Manual annotations are required before the round can continue."""

    def __init__(self, worklist_path, missing_ids):
        self.worklist_path = Path(worklist_path)
        self.missing_ids = sorted(missing_ids)
        super().__init__(
            f"{len(self.missing_ids)} annotation(s) outstanding for worklist "
            f"{self.worklist_path}; drop <case_id>.svol mask files into "
            f"{self.worklist_path.parent / 'annotations'} and rerun"
        )


class BordersPending(PauseRequested):
    """Manual border slices are required before the round can continue."""

    def __init__(self, borders_path, case_ids):
        self.borders_path = Path(borders_path)
        self.case_ids = sorted(case_ids)
        super().__init__(
            f"border slices needed for {len(self.case_ids)} case(s); write "
            f'{self.borders_path} as {{"case_id": [z_lo, z_hi], ...}} and rerun'
        )


@dataclass(frozen=True)
class RoundConfig:
    """Everything that determines a round's outputs besides the inputs
    themselves (corpus cases, teacher, base labels)."""

    k: int = 0
    st_enabled: bool = True
    borders: bool = False
    border_scope: str = "all"
    selection: str = "quality"
    ensemble_size: int = 16
    ensemble_seed: int = 0
    aggregator: str = "mean"
    include_identity: bool = True
    pseudo_mode: str = PSEUDO_TTA_MEDIAN
    st_floor: float | None = None
    annotator: str = "oracle"
    oracle: OracleConfig = OracleConfig()
    schedule: RestartSchedule = RestartSchedule()
    train_seed: int = 0
    selection_seed: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ValidationError("k must be >= 0")
        if self.border_scope not in BORDER_SCOPES:
            raise ValidationError(f"border_scope must be one of {BORDER_SCOPES}")
        if self.selection not in SELECTIONS:
            raise ValidationError(f"selection must be one of {SELECTIONS}")
        if self.annotator not in ANNOTATORS:
            raise ValidationError(f"annotator must be one of {ANNOTATORS}")
        if self.aggregator not in AGGREGATORS:
            raise ValidationError(f"aggregator must be one of {AGGREGATORS}")
        if self.pseudo_mode not in PSEUDO_MODES:
            raise ValidationError(f"pseudo_mode must be one of {PSEUDO_MODES}")
        if self.ensemble_size < 2:
            raise ValidationError("ensemble_size must be >= 2")
        if self.st_floor is not None and not 0.0 <= self.st_floor < 1.0:
            raise ValidationError("st_floor must be in [0, 1)")
        if self.selection == "random" and self.st_enabled:
            raise ValidationError("random selection has no quality estimates to threshold")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "st_enabled": self.st_enabled,
            "borders": self.borders,
            "border_scope": self.border_scope,
            "selection": self.selection,
            "ensemble_size": self.ensemble_size,
            "ensemble_seed": self.ensemble_seed,
            "aggregator": self.aggregator,
            "include_identity": self.include_identity,
            "pseudo_mode": self.pseudo_mode,
            "st_floor": self.st_floor,
            "annotator": self.annotator,
            "oracle": self.oracle.to_dict(),
            "schedule": self.schedule.to_dict(),
            "train_seed": self.train_seed,
            "selection_seed": self.selection_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundConfig":
        d = dict(d)
        d["oracle"] = OracleConfig.from_dict(d["oracle"])
        d["schedule"] = RestartSchedule.from_dict(d["schedule"])
        return cls(**d)

    def digest(self) -> str:
        return digest_of(self.to_dict())


@dataclass
class RoundResult:
    round_dir: Path
    config: RoundConfig
    stage_reached: str
    reports: list[QualityReport] = field(default_factory=list)
    plan: SelectionPlan | None = None
    trainset: TrainSet | None = None
    student_path: Path | None = None

    def student(self) -> ToySegmenter:
        if self.student_path is None:
            raise ValidationError("round stopped before the student was trained")
        return ToySegmenter.load(self.student_path)


def _relref(path, start) -> str:
    return Path(os.path.relpath(Path(path), Path(start))).as_posix()


def load_label(path):
    lab = load_svol(path)
    if not isinstance(lab, (Mask, ProbMap)):
        raise ValidationError(f"{path}: labels must be masks or probability maps")
    return lab


def annotate_cases(oracle: AnnotationOracle, ids, out_dir) -> dict[str, Path]:
    """Write <id>.svol annotation masks, skipping ones already present."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for cid in sorted(ids):
        p = out_dir / f"{cid}.svol"
        if not p.exists():
            save_svol(oracle.annotate(cid), p)
        paths[cid] = p
    return paths


def train_teacher(
    corpus: Corpus,
    ids,
    labels: dict[str, Path],
    schedule: RestartSchedule,
    seed: int,
    config: ToyConfig | None = None,
) -> ToySegmenter:
    """Fresh model from manually labeled cases (labels given as svol paths)."""
    cases = [
        TrainingCase(cid, corpus.volume(cid), load_label(labels[cid]))
        for cid in sorted(ids)
    ]
    return ToySegmenter.train(cases, schedule, seed, config or ToyConfig())


# --- per-case quality estimation with an optional shared cache -------------------


def _qe_case(corpus, cid, segmenter, ensemble, cfg: RoundConfig, roi, cache_dir):
    """Returns (report, median prob, identity prob), consulting the cache.

    Cache entries are keyed by the full content digest of everything the
    result depends on, so distinct arms of a study can share one cache
    directory and reruns cost one inference pass in total.
    """
    vol = corpus.volume(cid)
    model_digest = segmenter.digest() if hasattr(segmenter, "digest") else None
    entry = None
    if cache_dir is not None and model_digest is not None:
        key = digest_of(
            {
                "case_id": cid,
                "volume": volume_digest(vol),
                "model": model_digest,
                "ensemble": ensemble_to_manifest(ensemble),
                "aggregator": cfg.aggregator,
                "include_identity": cfg.include_identity,
                "roi": None if roi is None else list(roi),
            }
        )
        entry = Path(cache_dir) / key
        if (entry / "report.json").exists():
            report = QualityReport.from_dict(read_json(entry / "report.json"))
            median = load_svol(entry / "median.svol")
            ident = load_svol(entry / "ident.svol")
            return report, median, ident

    preds = tta_infer(segmenter, vol, ensemble)
    sm = median_vote(preds)
    report = estimate_quality(
        cid, preds, sm,
        aggregator=cfg.aggregator, roi=roi, include_identity=cfg.include_identity,
    )
    if entry is not None:
        entry.mkdir(parents=True, exist_ok=True)
        save_svol(sm.prob, entry / "median.svol")
        save_svol(preds[0], entry / "ident.svol")
        write_json(entry / "report.json", report.to_dict())
    return report, sm.prob, preds[0]


def _oracle_borders(corpus: Corpus, cfg: RoundConfig, ids) -> dict[str, tuple[int, int]]:
    oracle = AnnotationOracle(corpus.truths(), cfg.oracle)
    out = {}
    for cid in sorted(ids):
        b = oracle.border_slices(cid)
        if b is None:
            raise ValidationError(f"case {cid}: cannot take border slices of an empty structure")
        out[cid] = b
    return out


def _read_borders(path) -> dict[str, tuple[int, int]]:
    raw = read_json(path)
    return {cid: (int(v[0]), int(v[1])) for cid, v in raw.items()}


def run_round(
    round_dir,
    corpus: Corpus,
    teacher,
    base_ids,
    pool_ids,
    base_labels: dict[str, Path],
    config: RoundConfig,
    *,
    qe_cache=None,
    stop_after: str | None = None,
) -> RoundResult:
    """Execute (or resume) one round under `round_dir`.

    `teacher` is anything with predict_soft (and fine_tune for the final
    stage). `base_labels` maps every base id to its mask file. `qe_cache`
    is an optional directory shared between rounds; `stop_after` names a
    stage after which to return early (mainly for tests and debugging).
    """
    if stop_after is not None and stop_after not in STAGES:
        raise ValidationError(f"stop_after must be one of {STAGES}, got {stop_after!r}")
    round_dir = Path(round_dir)
    round_dir.mkdir(parents=True, exist_ok=True)
    base_ids = sorted(base_ids)
    pool_ids = sorted(pool_ids)
    missing = [cid for cid in base_ids if cid not in base_labels]
    if missing:
        raise ValidationError(f"base cases without labels: {missing}")
    overlap = sorted(set(base_ids) & set(pool_ids))
    if overlap:
        raise ValidationError(f"cases in both base and pool: {overlap}")

    result = RoundResult(round_dir=round_dir, config=config, stage_reached="config")

    # config: freeze the round inputs, refuse to resume against different ones
    teacher_digest = teacher.digest() if hasattr(teacher, "digest") else None
    cfg_payload = {
        "round": config.to_dict(),
        "base_ids": base_ids,
        "pool_ids": pool_ids,
        "teacher_digest": teacher_digest,
    }
    cfg_path = round_dir / "config.json"
    if cfg_path.exists():
        stored = read_json(cfg_path)
        if stored != cfg_payload:
            raise ValidationError(
                f"{cfg_path} was produced from different inputs; "
                "use a fresh round directory"
            )
    else:
        write_json(cfg_path, cfg_payload)
    if stop_after == "config":
        return result

    # ensemble
    ens_path = round_dir / "ensemble.json"
    if ens_path.exists():
        ensemble = load_ensemble(ens_path)
    else:
        ensemble = enumerate_transforms(config.ensemble_size, config.ensemble_seed)
        save_ensemble(ensemble, ens_path)
    result.stage_reached = "ensemble"
    if stop_after == "ensemble":
        return result

    # borders over the whole pool (scope "all" feeds them into QE as the ROI)
    borders: dict[str, tuple[int, int]] = {}
    borders_path = round_dir / "borders.json"
    if config.borders and config.border_scope == "all":
        if borders_path.exists():
            borders = _read_borders(borders_path)
        elif config.annotator == "oracle":
            borders = _oracle_borders(corpus, config, pool_ids)
            write_json(borders_path, {cid: list(b) for cid, b in borders.items()})
        else:
            raise BordersPending(borders_path, pool_ids)
    result.stage_reached = "borders"
    if stop_after == "borders":
        return result

    # qe: quality-estimate the pool and stash uncorrected pseudo-label sources
    qe_path = round_dir / "qe_reports.csv"
    pseudo_dir = round_dir / "pseudo"
    reports: list[QualityReport] = []
    if config.selection == "quality":
        pseudo_dir.mkdir(exist_ok=True)
        have_csv = qe_path.exists()
        if have_csv:
            reports = read_quality_reports(qe_path)
            if sorted(r.case_id for r in reports) != pool_ids:
                raise ValidationError(f"{qe_path} does not cover the configured pool")
        for cid in pool_ids:
            pseudo_path = pseudo_dir / f"{cid}.svol"
            if have_csv and pseudo_path.exists():
                continue
            roi = borders.get(cid)
            report, median, ident = _qe_case(corpus, cid, teacher, ensemble, config, roi, qe_cache)
            if not have_csv:
                reports.append(report)
            if not pseudo_path.exists():
                sm = SoftMedian(median, Mask(median.data >= VOTE_THRESHOLD, median.spacing_mm))
                label = build_pseudo_label(cid, config.pseudo_mode, [ident], sm, border=None)
                save_svol(label, pseudo_path)
        if not have_csv:
            write_quality_reports(reports, qe_path)
    result.reports = reports
    result.stage_reached = "qe"
    if stop_after == "qe":
        return result

    # plan + worklist
    plan_path = round_dir / "plan.json"
    if plan_path.exists():
        plan = SelectionPlan.load(plan_path)
    else:
        n_labeled = len(base_ids) + config.k
        if config.selection == "quality":
            plan = make_selection_plan(
                reports, config.k, n_labeled,
                floor=config.st_floor, st_enabled=config.st_enabled,
            )
        else:
            plan = make_random_plan(pool_ids, config.k, n_labeled, config.selection_seed)
        plan.save(plan_path)
    worklist_path = round_dir / "worklist.csv"
    if not worklist_path.exists():
        rows = [
            (cid, _relref(corpus.root / corpus.case(cid).volume_path, round_dir),
             plan.scores.get(cid))
            for cid in plan.al_ids
        ]
        write_worklist(worklist_path, rows)
    result.plan = plan
    result.stage_reached = "plan"
    if stop_after == "plan":
        return result

    # annotations for the AL picks
    ann_dir = round_dir / "annotations"
    if plan.al_ids:
        if config.annotator == "oracle":
            oracle = AnnotationOracle(corpus.truths(), config.oracle)
            annotate_cases(oracle, plan.al_ids, ann_dir)
        else:
            ann_dir.mkdir(exist_ok=True)
            pending = [cid for cid in plan.al_ids if not (ann_dir / f"{cid}.svol").exists()]
            if pending:
                raise WorklistPending(worklist_path, pending)
        for cid in plan.al_ids:
            lab = load_label(ann_dir / f"{cid}.svol")
            if not isinstance(lab, Mask):
                raise ValidationError(f"annotation for {cid} must be a mask")
            corpus.volume(cid).require_same_geometry(lab, f"annotation for {cid}")
    result.stage_reached = "annotations"
    if stop_after == "annotations":
        return result

    # borders for the ST picks only (cheap variant: no QE restriction)
    if config.borders and config.border_scope == "st-only" and plan.st_ids:
        if borders_path.exists():
            borders = _read_borders(borders_path)
        elif config.annotator == "oracle":
            borders = _oracle_borders(corpus, config, plan.st_ids)
            write_json(borders_path, {cid: list(b) for cid, b in borders.items()})
        else:
            raise BordersPending(borders_path, plan.st_ids)

    # labels: final pseudo-labels, border-corrected where borders are known
    st_dir = round_dir / "labels" / "st"
    for cid in plan.st_ids:
        out = st_dir / f"{cid}.svol"
        if out.exists():
            continue
        st_dir.mkdir(parents=True, exist_ok=True)
        label = load_svol(pseudo_dir / f"{cid}.svol")
        if config.borders and cid in borders:
            label = apply_border_correction(label, borders[cid])
        save_svol(label, out)
    result.stage_reached = "labels"
    if stop_after == "labels":
        return result

    # trainset manifest
    ts_path = round_dir / "trainset.json"
    if ts_path.exists():
        trainset = TrainSet.load(ts_path)
    else:
        def vol_ref(cid):
            return _relref(corpus.root / corpus.case(cid).volume_path, round_dir)

        def tag(cid):
            return corpus.case(cid).domain_tag

        base_recs = [
            CaseRecord(cid, vol_ref(cid), _relref(base_labels[cid], round_dir),
                       LABEL_MANUAL_HARD, None, tag(cid))
            for cid in base_ids
        ]
        al_recs = [
            CaseRecord(cid, vol_ref(cid), _relref(ann_dir / f"{cid}.svol", round_dir),
                       LABEL_MANUAL_HARD, None, tag(cid))
            for cid in plan.al_ids
        ]
        st_recs = [
            CaseRecord(cid, vol_ref(cid), _relref(st_dir / f"{cid}.svol", round_dir),
                       LABEL_PSEUDO_SOFT, borders.get(cid) if config.borders else None, tag(cid))
            for cid in plan.st_ids
        ]
        trainset = assemble_trainset(base_recs, al_recs, st_recs)
        trainset.save(ts_path)
    result.trainset = trainset
    result.stage_reached = "trainset"
    if stop_after == "trainset":
        return result

    # student
    student_path = round_dir / "student.json"
    if not student_path.exists():
        if not hasattr(teacher, "fine_tune"):
            raise ValidationError(
                "this segmenter cannot be fine-tuned in-process; "
                "rerun with stop_after='trainset' and train externally"
            )
        cases = [
            TrainingCase(
                rec.case_id,
                load_svol(round_dir / rec.volume_ref),
                load_label(round_dir / rec.label_ref),
            )
            for rec in trainset.all_cases()
        ]
        student = teacher.fine_tune(cases, config.schedule, config.train_seed)
        student.save(student_path)
    result.student_path = student_path
    result.stage_reached = "student"
    return result


# --- evaluation -------------------------------------------------------------------


_EVAL_HEADER = ["case_id", "dice", "hausdorff95_mm", "assd2d_mm"]


def evaluate_model(model, corpus: Corpus, ids, threshold: float = 0.5,
                   one_sided: str = "skip") -> list[dict]:
    """Per-case metrics of binarized predictions against the corpus truth."""
    rows = []
    for cid in sorted(ids):
        pred = binarize(model.predict_soft(corpus.volume(cid)), threshold)
        m = compute_metrics(pred, corpus.truth(cid), one_sided=one_sided)
        rows.append(
            {
                "case_id": cid,
                "dice": m.dice,
                "hausdorff95_mm": m.hausdorff95_mm,
                "assd2d_mm": m.assd2d_mm,
            }
        )
    return rows


def write_eval(path, rows: list[dict]) -> None:
    write_csv(path, _EVAL_HEADER, [[r[k] for k in _EVAL_HEADER] for r in rows])


def read_eval(path) -> list[dict]:
    header, rows = read_csv(path)
    if header != _EVAL_HEADER:
        raise ValidationError(f"unexpected eval header in {path}: {header}")
    out = []
    for r in rows:
        out.append(
            {
                "case_id": r[0],
                "dice": float(r[1]),
                "hausdorff95_mm": None if r[2] == "" else float(r[2]),
                "assd2d_mm": None if r[3] == "" else float(r[3]),
            }
        )
    return out


def summarize_eval(rows: list[dict]) -> dict:
    """Mean per metric; distance metrics average over the cases where they
    are defined and report that count alongside."""
    out = {"n": len(rows), "mean_dice": float(np.mean([r["dice"] for r in rows])) if rows else None}
    for key in ("hausdorff95_mm", "assd2d_mm"):
        vals = [r[key] for r in rows if r[key] is not None]
        out[f"mean_{key}"] = float(np.mean(vals)) if vals else None
        out[f"n_{key}"] = len(vals)
    return out
