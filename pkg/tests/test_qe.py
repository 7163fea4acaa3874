from __future__ import annotations

import numpy as np
import pytest

from ttaseg.exceptions import GeometryError
from ttaseg.qe import (
    QualityReport,
    estimate_quality,
    median_vote,
    rank_by_quality,
    read_quality_reports,
    write_quality_reports,
)
from ttaseg.volcore import Mask, ProbMap

from conftest import random_blob_mask
from oracles import brute_median

UNIT = (1.0, 1.0, 1.0)
SHAPE = (4, 4, 4)


def const_probs(vals, shape=SHAPE):
    return [ProbMap(np.full(shape, v, dtype=np.float32), UNIT) for v in vals]


def rand_probs(rng, n, shape=SHAPE):
    return [ProbMap(rng.random(size=shape).astype(np.float32), UNIT) for _ in range(n)]


# --- median vote -----------------------------------------------------------


def test_median_odd_count():
    sm = median_vote(const_probs([0.1, 0.9, 0.6, 0.2, 1.0]))
    assert np.allclose(sm.prob.data, 0.6)
    assert sm.mask.data.all()


def test_median_even_count_midpoint_matches_sort_oracle():
    vals = [0.1, 0.4, 0.8, 1.0]
    sm = median_vote(const_probs(vals))
    want = np.float32(brute_median([float(np.float32(v)) for v in vals]))
    assert sm.prob.data.flat[0] == want
    assert float(want) == pytest.approx(0.6, abs=1e-7)


def test_median_of_identical_is_identity(rng):
    p = ProbMap(rng.random(size=SHAPE).astype(np.float32), UNIT)
    sm = median_vote([p, p, p])
    assert sm.prob.data.tobytes() == p.data.tobytes()


def test_median_permutation_invariant(rng):
    preds = rand_probs(rng, 5)
    a = median_vote(preds)
    order = rng.permutation(5)
    b = median_vote([preds[i] for i in order])
    assert a.prob.data.tobytes() == b.prob.data.tobytes()


def test_median_mask_is_threshold_of_prob(rng):
    for n in (2, 3, 4, 5):
        sm = median_vote(rand_probs(rng, n))
        assert (sm.mask.data == (sm.prob.data >= 0.5)).all()


def test_median_vote_validation(rng):
    with pytest.raises(ValueError):
        median_vote(rand_probs(rng, 1))
    a = ProbMap(np.zeros(SHAPE, np.float32), UNIT)
    b = ProbMap(np.zeros((4, 4, 5), np.float32), UNIT)
    with pytest.raises(GeometryError):
        median_vote([a, b])


def test_median_matches_sort_oracle_voxelwise(rng):
    preds = rand_probs(rng, 4, shape=(2, 3, 3))
    sm = median_vote(preds)
    for idx in np.ndindex(*sm.prob.shape):
        vals = [float(p.data[idx]) for p in preds]
        assert sm.prob.data[idx] == np.float32(brute_median(vals))


# --- estimate_quality --------------------------------------------------------


def test_estimate_unanimous_is_perfect(rng):
    m = random_blob_mask(rng, SHAPE)
    p = ProbMap(m.astype(np.float32), UNIT)
    preds = [p, p, p, p]
    sm = median_vote(preds)
    for agg in ("mean", "median"):
        r = estimate_quality("c", preds, sm, aggregator=agg)
        assert r.estimated_dice == 1.0
        assert r.per_aug_dice == [1.0, 1.0, 1.0, 1.0]
        assert r.ensemble_size == 4


def test_estimate_split_ensemble_half_agreement(rng):
    m = random_blob_mask(rng, SHAPE)
    full = ProbMap(m.astype(np.float32), UNIT)
    empty = ProbMap(np.zeros(SHAPE, np.float32), UNIT)
    preds = [full, empty, full, empty]
    sm = median_vote(preds)
    # even split: median is 0.5 inside m, so the vote mask is m itself
    assert (sm.mask.data == m).all()
    r = estimate_quality("c", preds, sm, aggregator="mean")
    assert r.per_aug_dice == [1.0, 0.0, 1.0, 0.0]
    assert r.estimated_dice == 0.5


def test_estimate_roi_background_only_is_perfect(rng):
    data = np.zeros(SHAPE, np.float32)
    data[2:] = rng.random(size=(2, 4, 4))
    preds = [ProbMap(np.roll(data, i, axis=1), UNIT) for i in range(3)]
    sm = median_vote(preds)
    r = estimate_quality("c", preds, sm, roi=(0, 1))
    assert r.estimated_dice == 1.0
    assert r.roi == (0, 1)


def test_estimate_full_roi_equals_no_roi(rng):
    preds = rand_probs(rng, 4)
    sm = median_vote(preds)
    a = estimate_quality("c", preds, sm)
    b = estimate_quality("c", preds, sm, roi=(0, SHAPE[0] - 1))
    assert a.estimated_dice == b.estimated_dice
    assert a.per_aug_dice == b.per_aug_dice


def test_estimate_roi_validation(rng):
    preds = rand_probs(rng, 2)
    sm = median_vote(preds)
    for roi in ((-1, 2), (2, 1), (0, SHAPE[0])):
        with pytest.raises(ValueError):
            estimate_quality("c", preds, sm, roi=roi)


def test_estimate_exclude_identity(rng):
    m = random_blob_mask(rng, SHAPE)
    full = ProbMap(m.astype(np.float32), UNIT)
    empty = ProbMap(np.zeros(SHAPE, np.float32), UNIT)
    preds = [empty, full, full, full]
    sm = median_vote(preds)
    with_id = estimate_quality("c", preds, sm)
    without = estimate_quality("c", preds, sm, include_identity=False)
    assert len(with_id.per_aug_dice) == 4
    assert len(without.per_aug_dice) == 3
    assert without.estimated_dice == 1.0
    assert with_id.estimated_dice == pytest.approx(0.75)
    assert without.ensemble_size == 4


def test_estimate_median_aggregator(rng):
    m = random_blob_mask(rng, SHAPE)
    full = ProbMap(m.astype(np.float32), UNIT)
    empty = ProbMap(np.zeros(SHAPE, np.float32), UNIT)
    preds = [full, full, full, empty, empty]
    sm = median_vote(preds)
    r = estimate_quality("c", preds, sm, aggregator="median")
    assert r.estimated_dice == 1.0  # median of [1,1,1,0,0]


def test_agreement_with_vote_mask_never_lowers_mean_estimate(rng):
    # replacing any member with the vote mask's probabilities fixes that
    # member's Dice at 1.0 and provably leaves the vote mask unchanged
    for trial in range(40):
        n = int(rng.integers(2, 7))
        preds = rand_probs(rng, n, shape=(3, 3, 3))
        sm = median_vote(preds)
        est = estimate_quality("c", preds, sm).estimated_dice
        i = int(rng.integers(n))
        swapped = list(preds)
        swapped[i] = ProbMap(sm.mask.data.astype(np.float32), UNIT)
        sm2 = median_vote(swapped)
        assert (sm2.mask.data == sm.mask.data).all()
        est2 = estimate_quality("c", swapped, sm2).estimated_dice
        assert est2 >= est - 1e-12


# --- ranking -----------------------------------------------------------------


def report(cid, scores):
    return QualityReport(
        case_id=cid,
        estimated_dice=float(np.mean(scores)),
        per_aug_dice=list(scores),
        aggregator="mean",
        roi=None,
        ensemble_size=len(scores),
    )


def test_rank_worst_first_with_id_ties():
    rs = [report("b", [0.9]), report("a", [0.2]), report("c", [0.2]), report("d", [0.5])]
    assert rank_by_quality(rs) == ["a", "c", "d", "b"]


def test_rank_matches_sorted_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(1, 12))
        rs = [report(f"k{i:02d}", [float(rng.integers(0, 5)) / 4.0]) for i in range(n)]
        got = rank_by_quality(rs)
        want = [cid for _, cid in sorted((r.estimated_dice, r.case_id) for r in rs)]
        assert got == want


def test_rank_rejects_duplicate_ids():
    with pytest.raises(ValueError):
        rank_by_quality([report("a", [0.1]), report("a", [0.2])])


# --- report validation and persistence ---------------------------------------


def test_report_validation():
    with pytest.raises(ValueError):
        QualityReport("c", 0.9, [0.1, 0.2], "mean", None, 2)
    with pytest.raises(ValueError):
        QualityReport("c", 0.5, [0.5, 1.5], "mean", None, 2)  # out of range
    with pytest.raises(ValueError):
        QualityReport("c", 0.5, [0.5], "mode", None, 1)
    with pytest.raises(ValueError):
        QualityReport("c", 0.5, [0.5], "mean", (3, 1), 1)
    with pytest.raises(ValueError):
        QualityReport("c", 0.5, [0.5, 0.5], "mean", None, 1)  # size < len


def test_reports_csv_roundtrip(tmp_path, rng):
    reports = []
    for i in range(6):
        per = [float(rng.random()) for _ in range(5)]
        reports.append(
            QualityReport(
                case_id=f"case-{i:03d}",
                estimated_dice=float(np.mean(per)),
                per_aug_dice=per,
                aggregator="mean",
                roi=(1, 3) if i % 2 else None,
                ensemble_size=5,
            )
        )
    path = tmp_path / "qe.csv"
    write_quality_reports(reports, path)
    back = read_quality_reports(path)
    assert back == reports
    # byte-stable rewrite
    first = path.read_bytes()
    write_quality_reports(back, path)
    assert path.read_bytes() == first
