"""Desk-scale study harness: three experiment designs over synthetic corpora.

st-only
    One low-variability domain plus a contrast-shifted variant. Compares the
    unadapted teacher, fine-tuning on the base set alone, self-training over
    the unlabeled pool, and fully supervised references, on in-domain and
    shifted test cases.

transfer-al-st
    A source domain and a structurally different target domain (different
    contrast, cropped field of view). A source model (optionally improved by
    a source-side self-training round) is adapted to the target pool with
    random picks, quality-ranked picks (AL), AL plus self-training, and AL
    plus self-training with border-slice corrections.

highvar
    A deliberately heterogeneous domain in which a minority of cases draw a
    much harder intensity profile. Compares annotation budget spent by
    quality ranking against random picks, with and without self-training.

Each study runs the same round machinery per seed over one shared corpus and
one shared quality-estimation cache; every artifact lands under the study
directory and reruns resume or verify byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .exceptions import ValidationError
from .pipeline import (
    RoundConfig,
    annotate_cases,
    evaluate_model,
    load_label,
    read_eval,
    run_round,
    train_teacher,
    write_eval,
)
from .synth import (
    AnnotationOracle,
    Corpus,
    OracleConfig,
    PhantomSpec,
    generate_corpus,
    high_variability_spec,
    low_variability_spec,
)
from .toyseg import RestartSchedule, ToyConfig, ToySegmenter, TrainingCase
from .util import digest_of, read_csv, read_json, stable_seed, write_csv, write_json

STUDIES = ("st-only", "transfer-al-st", "highvar")

DEFAULT_TEACHER_SCHEDULE = RestartSchedule(total_cycles=5)
DEFAULT_ROUND_SCHEDULE = RestartSchedule(eta_max=0.6, eta_min=0.01, t0=20, t_mult=2, total_cycles=2)


@dataclass(frozen=True)
class ArmSpec:
    """How one study arm obtains the model it is evaluated with."""

    name: str
    kind: str  # "teacher" | "full" | "full-ft" | "round"
    k: int = 0
    st_enabled: bool = False
    selection: str = "quality"
    borders: bool = False
    border_scope: str = "all"
    uses_pool: bool = True  # round arms only: False fine-tunes on base alone
    teacher: str = "default"  # transfer study: "default" (post-ST) or "direct"


_ARMS: dict[str, tuple[ArmSpec, ...]] = {
    "st-only": (
        ArmSpec("baseline", "teacher"),
        ArmSpec("ft", "round", k=0, st_enabled=False, uses_pool=False),
        ArmSpec("st", "round", k=0, st_enabled=True),
        ArmSpec("full-baseline", "full"),
        ArmSpec("full-ft", "full-ft"),
    ),
    "transfer-al-st": (
        ArmSpec("target-baseline", "teacher"),
        ArmSpec("random", "round", k=3, st_enabled=False, selection="random"),
        ArmSpec("al", "round", k=3, st_enabled=False),
        ArmSpec("al-st", "round", k=3, st_enabled=True),
        ArmSpec("al-st-borders", "round", k=2, st_enabled=True, borders=True),
        ArmSpec("al-st-borders-direct", "round", k=2, st_enabled=True, borders=True, teacher="direct"),
    ),
    "highvar": (
        ArmSpec("baseline", "teacher"),
        ArmSpec("st", "round", k=0, st_enabled=True),
        ArmSpec("random", "round", k=5, st_enabled=False, selection="random"),
        ArmSpec("al", "round", k=5, st_enabled=False),
        ArmSpec("al-st", "round", k=5, st_enabled=True),
        ArmSpec("full-baseline", "full"),
    ),
}

_SIZES: dict[str, dict[str, int]] = {
    "st-only": {"n_base": 6, "n_pool": 28, "n_test": 16, "n_ood": 16, "n_src_pool": 0},
    "transfer-al-st": {"n_base": 6, "n_pool": 16, "n_test": 12, "n_ood": 0, "n_src_pool": 12},
    "highvar": {"n_base": 10, "n_pool": 40, "n_test": 20, "n_ood": 10, "n_src_pool": 0},
}


def arm_names(study: str) -> tuple[str, ...]:
    return tuple(a.name for a in _ARMS[study])


@dataclass(frozen=True)
class StudyConfig:
    study: str
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    arms: tuple[str, ...] | None = None  # None = every arm the study defines
    ensemble_size: int = 16
    aggregator: str = "mean"
    corpus_seed: int = 7
    shape: tuple[int, int, int] = (48, 48, 48)
    # size overrides (None = study default); used by miniature test runs
    n_base: int | None = None
    n_pool: int | None = None
    n_test: int | None = None
    n_ood: int | None = None
    n_src_pool: int | None = None
    k: int | None = None
    samples_per_class: int = 16
    teacher_schedule: RestartSchedule = DEFAULT_TEACHER_SCHEDULE
    round_schedule: RestartSchedule = DEFAULT_ROUND_SCHEDULE
    oracle: OracleConfig = OracleConfig()

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ValidationError(f"study must be one of {STUDIES}, got {self.study!r}")
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValidationError("seeds must be unique")
        if self.arms is not None:
            bad = [a for a in self.arms if a not in arm_names(self.study)]
            if bad:
                raise ValidationError(f"unknown arms for {self.study}: {bad}")

    def sizes(self) -> dict[str, int]:
        out = dict(_SIZES[self.study])
        for key in out:
            override = getattr(self, key)
            if override is not None:
                out[key] = override
        return out

    def arm_specs(self) -> tuple[ArmSpec, ...]:
        specs = _ARMS[self.study]
        if self.arms is not None:
            specs = tuple(s for s in specs if s.name in self.arms)
        if self.k is not None:
            specs = tuple(
                replace(s, k=min(self.k, s.k) if s.borders else self.k)
                if s.kind == "round" and s.k > 0 else s
                for s in specs
            )
        return specs

    def toy_config(self) -> ToyConfig:
        return ToyConfig(samples_per_class=self.samples_per_class)

    def to_dict(self) -> dict:
        return {
            "study": self.study,
            "seeds": list(self.seeds),
            "arms": None if self.arms is None else list(self.arms),
            "ensemble_size": self.ensemble_size,
            "aggregator": self.aggregator,
            "corpus_seed": self.corpus_seed,
            "shape": list(self.shape),
            "n_base": self.n_base,
            "n_pool": self.n_pool,
            "n_test": self.n_test,
            "n_ood": self.n_ood,
            "n_src_pool": self.n_src_pool,
            "k": self.k,
            "samples_per_class": self.samples_per_class,
            "teacher_schedule": self.teacher_schedule.to_dict(),
            "round_schedule": self.round_schedule.to_dict(),
            "oracle": self.oracle.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        d = dict(d)
        d["seeds"] = tuple(d["seeds"])
        d["arms"] = None if d["arms"] is None else tuple(d["arms"])
        d["shape"] = tuple(d["shape"])
        d["teacher_schedule"] = RestartSchedule.from_dict(d["teacher_schedule"])
        d["round_schedule"] = RestartSchedule.from_dict(d["round_schedule"])
        d["oracle"] = OracleConfig.from_dict(d["oracle"])
        return cls(**d)

    def digest(self) -> str:
        return digest_of(self.to_dict())


# --- corpora per study -----------------------------------------------------------


def _target_spec(shape) -> PhantomSpec:
    """The transfer study's target domain: weaker object contrast near the
    source decision boundary plus a cropped field of view that can cut the
    structure.  Per-case contrast draws straddle the source operating point,
    so target quality spreads widely -- the regime quality estimation is for."""
    return PhantomSpec(
        shape=shape,
        fg_intensity=(0.50, 0.05),
        bg_intensity=(0.28, 0.03),
        noise_sigma=0.06,
        variability="low",
        shift="crop-fov",
        shift_magnitude=0.4,
    )


def study_groups(config: StudyConfig) -> list[tuple[str, PhantomSpec, int]]:
    n = config.sizes()
    shape = config.shape
    if config.study == "st-only":
        spec = low_variability_spec(shape=shape)
        ood = replace(spec, shift="contrast-shift", shift_magnitude=0.5)
        return [
            ("indomain", spec, n["n_base"] + n["n_pool"] + n["n_test"]),
            ("ood", ood, n["n_ood"]),
        ]
    if config.study == "transfer-al-st":
        src = low_variability_spec(shape=shape)
        tgt = _target_spec(shape)
        return [
            ("src", src, n["n_base"] + n["n_src_pool"]),
            ("tgt", tgt, n["n_pool"] + n["n_test"]),
        ]
    spec = high_variability_spec(shape=shape)
    ood = replace(spec, shift="contrast-shift", shift_magnitude=0.5)
    return [
        ("indomain", spec, n["n_base"] + n["n_pool"] + n["n_test"]),
        ("ood", ood, n["n_ood"]),
    ]


def build_study_corpus(out_dir, config: StudyConfig) -> Corpus:
    root = Path(out_dir) / "corpus"
    if (root / Corpus.MANIFEST).exists():
        return Corpus.load(root)
    return generate_corpus(root, study_groups(config), config.corpus_seed)


def _permuted(ids: list[str], seed: int) -> list[str]:
    order = np.random.default_rng(seed).permutation(len(ids))
    return [ids[i] for i in order]


def make_split(config: StudyConfig, corpus: Corpus, seed: int) -> dict[str, list[str]]:
    """Per-seed re-split of the generated bags into base / pool / eval sets."""
    n = config.sizes()
    if config.study == "transfer-al-st":
        src = _permuted(corpus.ids("src"), stable_seed(config.corpus_seed, "split-src", seed))
        tgt = _permuted(corpus.ids("tgt"), stable_seed(config.corpus_seed, "split-tgt", seed))
        return {
            "base": sorted(src[: n["n_base"]]),
            "src_pool": sorted(src[n["n_base"]:]),
            "pool": sorted(tgt[: n["n_pool"]]),
            "eval": sorted(tgt[n["n_pool"]:]),
        }
    ids = _permuted(corpus.ids("indomain"), stable_seed(config.corpus_seed, "split", seed))
    base = ids[: n["n_base"]]
    pool = ids[n["n_base"]: n["n_base"] + n["n_pool"]]
    test = ids[n["n_base"] + n["n_pool"]:]
    return {
        "base": sorted(base),
        "src_pool": [],
        "pool": sorted(pool),
        "eval": sorted(test) + corpus.ids("ood"),
    }


# --- one seed ----------------------------------------------------------------------


def _load_or_train(path: Path, builder) -> ToySegmenter:
    if path.exists():
        return ToySegmenter.load(path)
    model = builder()
    model.save(path)
    return model


def _run_seed(out_dir: Path, config: StudyConfig, corpus: Corpus, seed: int,
              qe_cache: Path) -> None:
    seed_dir = out_dir / f"seed_{seed}"
    seed_dir.mkdir(exist_ok=True)

    split_path = seed_dir / "split.json"
    split = make_split(config, corpus, seed)
    if split_path.exists():
        if read_json(split_path) != split:
            raise ValidationError(f"{split_path} disagrees with the configured split")
    else:
        write_json(split_path, split)

    oracle = AnnotationOracle(corpus.truths(), config.oracle)
    base_labels = annotate_cases(oracle, split["base"], seed_dir / "labels" / "base")
    toy = config.toy_config()

    teacher = _load_or_train(
        seed_dir / "teacher.json",
        lambda: train_teacher(corpus, split["base"], base_labels,
                              config.teacher_schedule, stable_seed("teacher", seed), toy),
    )

    # transfer study: optional source-side self-training pass first
    round_teachers = {"default": teacher, "direct": teacher}
    if config.study == "transfer-al-st":
        src_cfg = RoundConfig(
            k=0, st_enabled=True,
            ensemble_size=config.ensemble_size,
            ensemble_seed=stable_seed("ensemble-src", seed),
            aggregator=config.aggregator,
            oracle=config.oracle,
            schedule=config.round_schedule,
            train_seed=stable_seed("teacher", seed),
        )
        res = run_round(
            seed_dir / "source-st", corpus, teacher,
            split["base"], split["src_pool"], base_labels, src_cfg,
            qe_cache=qe_cache,
        )
        round_teachers["default"] = res.student()

    eval_dir = seed_dir / "eval"
    eval_dir.mkdir(exist_ok=True)
    for arm in config.arm_specs():
        eval_path = eval_dir / f"{arm.name}.csv"
        if eval_path.exists():
            continue
        model = _arm_model(arm, config, corpus, seed, seed_dir, split, base_labels,
                           round_teachers, oracle, qe_cache)
        write_eval(eval_path, evaluate_model(model, corpus, split["eval"]))


def _arm_model(arm: ArmSpec, config: StudyConfig, corpus: Corpus, seed: int,
               seed_dir: Path, split, base_labels, round_teachers, oracle,
               qe_cache: Path) -> ToySegmenter:
    toy = config.toy_config()
    if arm.kind == "teacher":
        return round_teachers["default"]
    if arm.kind in ("full", "full-ft"):
        # fully supervised references: every pool case manually labeled
        pool_labels = annotate_cases(oracle, split["pool"], seed_dir / "labels" / "pool")
        labels = {**base_labels, **pool_labels}
        ids = split["base"] + split["pool"]
        (seed_dir / "arms" / arm.name).mkdir(parents=True, exist_ok=True)
        if arm.kind == "full":
            return _load_or_train(
                seed_dir / "arms" / arm.name / "model.json",
                lambda: train_teacher(corpus, ids, labels, config.teacher_schedule,
                                      stable_seed("full", seed), toy),
            )

        def build():
            cases = [
                TrainingCase(cid, corpus.volume(cid), load_label(labels[cid]))
                for cid in sorted(ids)
            ]
            return round_teachers["default"].fine_tune(
                cases, config.round_schedule, stable_seed("full-ft", seed))

        return _load_or_train(seed_dir / "arms" / arm.name / "model.json", build)

    # round arms
    teacher = round_teachers[arm.teacher]
    round_cfg = RoundConfig(
        k=arm.k,
        st_enabled=arm.st_enabled,
        borders=arm.borders,
        border_scope=arm.border_scope,
        selection=arm.selection,
        ensemble_size=config.ensemble_size,
        ensemble_seed=stable_seed("ensemble", seed),
        aggregator=config.aggregator,
        oracle=config.oracle,
        schedule=config.round_schedule,
        # Reusing the teacher's sampling seed pairs the arms: with identical
        # training sets the fine-tune step re-draws the teacher's own sample
        # and is a pure continuation, so arms differ only by their data.
        train_seed=stable_seed("teacher", seed),
        selection_seed=stable_seed("selection", seed, arm.name),
    )
    pool = split["pool"] if arm.uses_pool else []
    res = run_round(
        seed_dir / "arms" / arm.name / "round", corpus, teacher,
        split["base"], pool, base_labels, round_cfg,
        qe_cache=qe_cache,
    )
    return res.student()


# --- aggregation -------------------------------------------------------------------


_SUMMARY_HEADER = [
    "study", "seed", "arm", "domain", "n",
    "mean_dice", "mean_hausdorff95_mm", "mean_assd2d_mm",
]
_REPORT_HEADER = [
    "study", "arm", "domain", "agg_mode", "n",
    "mean_dice", "std_dice", "min_dice",
    "mean_hausdorff95_mm", "mean_assd2d_mm", "config_digest",
]


def _mean_or_none(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def _std_or_none(vals):
    vals = [v for v in vals if v is not None]
    return float(np.std(vals, ddof=1)) if len(vals) > 1 else None


def build_report(out_dir) -> list[dict]:
    """(Re)compute seed_summary.csv and study_report.csv from the eval files."""
    out_dir = Path(out_dir)
    config = StudyConfig.from_dict(read_json(out_dir / "config.json"))
    corpus = Corpus.load(out_dir / "corpus")
    arms = [a.name for a in config.arm_specs()]

    # domain of each evaluated case is its corpus group tag
    per: dict[tuple[str, str], dict[int, list[dict]]] = {}
    summary_rows = []
    for seed in config.seeds:
        for arm in arms:
            path = out_dir / f"seed_{seed}" / "eval" / f"{arm}.csv"
            if not path.exists():
                raise ValidationError(f"missing eval file {path}; run the study first")
            rows = read_eval(path)
            by_domain: dict[str, list[dict]] = {}
            for r in rows:
                by_domain.setdefault(corpus.case(r["case_id"]).domain_tag, []).append(r)
            for domain in sorted(by_domain):
                drows = by_domain[domain]
                per.setdefault((arm, domain), {})[seed] = drows
                summary_rows.append([
                    config.study, seed, arm, domain, len(drows),
                    _mean_or_none([r["dice"] for r in drows]),
                    _mean_or_none([r["hausdorff95_mm"] for r in drows]),
                    _mean_or_none([r["assd2d_mm"] for r in drows]),
                ])
    write_csv(out_dir / "seed_summary.csv", _SUMMARY_HEADER, summary_rows)

    digest = config.digest()
    report_rows = []
    for arm in arms:
        domains = sorted({d for (a, d) in per if a == arm})
        for domain in domains:
            by_seed = per[(arm, domain)]
            seed_means = [
                _mean_or_none([r["dice"] for r in by_seed[s]]) for s in config.seeds
            ]
            pooled = [r for s in config.seeds for r in by_seed[s]]
            pooled_dice = [r["dice"] for r in pooled]
            for mode, vals in (("per-case", pooled_dice), ("per-run", seed_means)):
                defined = [v for v in vals if v is not None]
                report_rows.append([
                    config.study, arm, domain, mode, len(vals),
                    _mean_or_none(vals), _std_or_none(vals),
                    float(min(defined)) if defined else None,
                    _mean_or_none([r["hausdorff95_mm"] for r in pooled]),
                    _mean_or_none([r["assd2d_mm"] for r in pooled]),
                    digest,
                ])
    write_csv(out_dir / "study_report.csv", _REPORT_HEADER, report_rows)
    return [dict(zip(_REPORT_HEADER, row)) for row in report_rows]


def read_report(out_dir) -> list[dict]:
    header, rows = read_csv(Path(out_dir) / "study_report.csv")
    if header != _REPORT_HEADER:
        raise ValidationError(f"unexpected report header: {header}")
    out = []
    for r in rows:
        d = dict(zip(header, r))
        d["n"] = int(d["n"])
        for key in ("mean_dice", "std_dice", "min_dice", "mean_hausdorff95_mm", "mean_assd2d_mm"):
            d[key] = None if d[key] == "" else float(d[key])
        out.append(d)
    return out


# --- entry point --------------------------------------------------------------------


@dataclass
class StudyResult:
    out_dir: Path
    config: StudyConfig
    report: list[dict]


def run_study(out_dir, config: StudyConfig) -> StudyResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = out_dir / "config.json"
    if cfg_path.exists():
        if read_json(cfg_path) != config.to_dict():
            raise ValidationError(f"{cfg_path} holds a different study configuration")
    else:
        write_json(cfg_path, config.to_dict())

    corpus = build_study_corpus(out_dir, config)
    qe_cache = out_dir / "qe_cache"
    for seed in config.seeds:
        _run_seed(out_dir, config, corpus, seed, qe_cache)
    report = build_report(out_dir)
    return StudyResult(out_dir=out_dir, config=config, report=report)
