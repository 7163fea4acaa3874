from __future__ import annotations

import numpy as np
import pytest

from ttaseg.exceptions import GeometryError, ValidationError
from ttaseg.tta import enumerate_transforms, tta_infer
from ttaseg.toyseg import (
    ExternalSegmenter,
    PredictionsPending,
    RestartSchedule,
    ToyConfig,
    ToySegmenter,
    TrainingCase,
    answer_pending,
    loss_and_grad,
    lr_at,
    pending_inputs,
    volume_digest,
    volume_features,
)
from ttaseg.volcore import Mask, ProbMap, Volume, binarize, dice

from conftest import random_blob_mask

UNIT = (1.0, 1.0, 1.0)
FAST = RestartSchedule(eta_max=1.0, eta_min=0.01, t0=10, t_mult=2, total_cycles=2)


def blob_case(rng, cid, shape=(20, 20, 20), fg=1.0, bg=0.0, noise=0.0):
    m = random_blob_mask(rng, shape)
    data = np.where(m, fg, bg).astype(np.float32)
    if noise:
        data = data + rng.normal(0, noise, shape).astype(np.float32)
    return TrainingCase(cid, Volume(data, UNIT), Mask(m, UNIT))


# --- schedule ----------------------------------------------------------------


def test_lr_schedule_hand_values():
    s = RestartSchedule(eta_max=1.5, eta_min=0.01, t0=20, t_mult=2, total_cycles=3)
    assert s.total_epochs == 140
    assert lr_at(s, 0) == s.eta_max
    assert lr_at(s, 20) == s.eta_max  # restart boundary
    assert lr_at(s, 60) == s.eta_max  # second restart (20 + 40)
    assert lr_at(s, 10) == pytest.approx((s.eta_max + s.eta_min) / 2)  # cos(pi/2) = 0
    assert lr_at(s, 40) == pytest.approx((s.eta_max + s.eta_min) / 2)  # mid of 40-cycle
    assert s.eta_min < lr_at(s, 19) < lr_at(s, 10)
    with pytest.raises(ValueError):
        lr_at(s, 140)
    with pytest.raises(ValueError):
        lr_at(s, -1)


def test_lr_monotone_within_cycle():
    s = RestartSchedule(eta_max=1.0, eta_min=0.001, t0=13, t_mult=3, total_cycles=2)
    vals = [lr_at(s, e) for e in range(13)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert lr_at(s, 13) == s.eta_max


def test_schedule_validation():
    with pytest.raises(ValueError):
        RestartSchedule(eta_max=0.1, eta_min=0.2)
    with pytest.raises(ValueError):
        RestartSchedule(t0=0)
    zero = RestartSchedule(total_cycles=0)
    assert zero.total_epochs == 0


# --- loss and gradient ----------------------------------------------------------


def test_gradient_matches_finite_differences(rng):
    for _ in range(5):
        X = rng.normal(size=(64, 6))
        y = rng.random(size=64)
        w = rng.normal(size=6)
        _, g = loss_and_grad(w, X, y)
        h = 1e-6
        num = np.zeros(6)
        for j in range(6):
            e = np.zeros(6)
            e[j] = h
            lp, _ = loss_and_grad(w + e, X, y)
            lm, _ = loss_and_grad(w - e, X, y)
            num[j] = (lp - lm) / (2 * h)
        rel = np.linalg.norm(num - g) / max(np.linalg.norm(num), 1e-12)
        assert rel < 1e-4


def test_loss_at_zero_weights_is_log2(rng):
    X = rng.normal(size=(32, 6))
    y = rng.random(size=32)
    loss, _ = loss_and_grad(np.zeros(6), X, y)
    assert loss == pytest.approx(np.log(2.0))


# --- features ---------------------------------------------------------------------


def test_feature_shapes_and_bias(rng):
    v = Volume(rng.normal(size=(4, 5, 6)).astype(np.float32), UNIT)
    X = volume_features(v)
    assert X.shape == (4 * 5 * 6, 6)
    assert (X[:, 5] == 1.0).all()
    assert X[:, 0] == pytest.approx(v.data.ravel().astype(np.float64))
    assert X[:, 3] == pytest.approx(X[:, 0] ** 2)
    # z_norm spans [0, 1] front to back
    assert X[0, 4] == 0.0 and X[-1, 4] == 1.0


# --- training ----------------------------------------------------------------------


def test_training_is_deterministic(rng):
    cases = [blob_case(rng, f"c{i}") for i in range(3)]
    a = ToySegmenter.train(cases, FAST, seed=5)
    b = ToySegmenter.train(cases, FAST, seed=5)
    assert a.weights.tobytes() == b.weights.tobytes()
    assert a.feat_mean.tobytes() == b.feat_mean.tobytes()
    c = ToySegmenter.train(cases, FAST, seed=6)
    assert a.weights.tobytes() != c.weights.tobytes()


def test_training_separable_data_high_dice(rng):
    cases = [blob_case(rng, f"c{i}", noise=0.02) for i in range(3)]
    model = ToySegmenter.train(cases, FAST, seed=0)
    held = blob_case(rng, "held", noise=0.02)
    pred = binarize(model.predict_soft(held.volume), 0.5)
    assert dice(pred, held.label) > 0.95


def test_soft_half_targets_stay_at_half(rng):
    v = Volume(rng.normal(size=(8, 8, 8)).astype(np.float32), UNIT)
    lab = ProbMap(np.full((8, 8, 8), 0.5, dtype=np.float32), UNIT)
    model = ToySegmenter.train([TrainingCase("c", v, lab)], FAST, seed=1)
    # gradient is identically zero at w=0 for y=0.5, so weights stay zero
    assert (model.weights == 0).all()
    p = model.predict_soft(v)
    assert (p.data == np.float32(0.5)).all()


def test_training_lowers_error_vs_uninformed(rng):
    cases = [blob_case(rng, f"c{i}", noise=0.05) for i in range(2)]
    model = ToySegmenter.train(cases, FAST, seed=2)
    v, m = cases[0].volume, cases[0].label
    p = model.predict_soft(v).data.astype(np.float64)
    y = m.data.astype(np.float64)
    ce_model = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert ce_model < np.log(2.0) * 0.8


def test_fine_tune_keeps_stats_and_zero_epochs_is_identity(rng):
    cases = [blob_case(rng, f"c{i}") for i in range(2)]
    model = ToySegmenter.train(cases, FAST, seed=3)
    same = model.fine_tune(cases, RestartSchedule(total_cycles=0), seed=9)
    assert same.weights.tobytes() == model.weights.tobytes()
    assert same.digest() == model.digest()
    moved = model.fine_tune(cases, FAST, seed=9)
    assert moved.feat_mean.tobytes() == model.feat_mean.tobytes()
    assert moved.feat_std.tobytes() == model.feat_std.tobytes()


def test_fine_tune_adapts_to_intensity_shift(rng):
    src = [blob_case(rng, f"s{i}", fg=1.0, bg=0.0, noise=0.03) for i in range(3)]
    model = ToySegmenter.train(src, FAST, seed=4)
    tgt = [blob_case(rng, f"t{i}", fg=0.25, bg=0.85, noise=0.03) for i in range(3)]
    held = blob_case(rng, "held", fg=0.25, bg=0.85, noise=0.03)
    before = dice(binarize(model.predict_soft(held.volume), 0.5), held.label)
    tuned = model.fine_tune(tgt, FAST, seed=4)
    after = dice(binarize(tuned.predict_soft(held.volume), 0.5), held.label)
    assert after > before


def test_training_case_geometry_checked(rng):
    v = Volume(np.zeros((4, 4, 4), np.float32), UNIT)
    m = Mask(np.zeros((4, 4, 5), bool), UNIT)
    with pytest.raises(GeometryError):
        TrainingCase("c", v, m)
    with pytest.raises(ValidationError):
        TrainingCase("c", v, None)
    with pytest.raises(ValidationError):
        ToySegmenter.train([], FAST, seed=0)


# --- prediction -------------------------------------------------------------------


def test_predict_bounds_and_zero_model(rng):
    model = ToySegmenter(np.zeros(6), np.zeros(6), np.ones(6))
    v = Volume(rng.normal(size=(5, 5, 5)).astype(np.float32), (2.0, 1.0, 1.5))
    p = model.predict_soft(v)
    assert (p.data == np.float32(0.5)).all()
    assert p.spacing_mm == v.spacing_mm
    biased = ToySegmenter(np.array([0, 0, 0, 0, 0, 50.0]), np.zeros(6), np.ones(6))
    q = biased.predict_soft(v)
    assert q.data.max() < 1.0 and q.data.min() > 0.0  # clipped strictly inside
    assert q.data.min() > 0.99


def test_model_roundtrip_preserves_predictions(tmp_path, rng):
    cases = [blob_case(rng, "c0")]
    model = ToySegmenter.train(cases, FAST, seed=7)
    path = tmp_path / "model.json"
    model.save(path)
    back = ToySegmenter.load(path)
    assert back.digest() == model.digest()
    v = cases[0].volume
    assert back.predict_soft(v).data.tobytes() == model.predict_soft(v).data.tobytes()


# --- external segmenter --------------------------------------------------------------


def test_external_segmenter_contract(tmp_path, rng):
    job = tmp_path / "job"
    ext = ExternalSegmenter(job)
    v = Volume(rng.normal(size=(6, 6, 6)).astype(np.float32), UNIT)
    with pytest.raises(PredictionsPending) as ei:
        ext.predict_soft(v)
    vid = volume_digest(v)
    assert ei.value.missing_ids == [vid]
    assert pending_inputs(job) == [vid]
    # the input landed on disk for the external process to pick up
    assert (job / "inputs" / f"{vid}.svol").exists()

    model = ToySegmenter(np.zeros(6), np.zeros(6), np.ones(6))
    assert answer_pending(job, model) == 1
    out = ext.predict_soft(v)
    assert out.data.tobytes() == model.predict_soft(v).data.tobytes()
    assert pending_inputs(job) == []


def test_external_segmenter_validates_answers(tmp_path, rng):
    job = tmp_path / "job"
    ext = ExternalSegmenter(job)
    v = Volume(rng.normal(size=(4, 4, 4)).astype(np.float32), UNIT)
    with pytest.raises(PredictionsPending):
        ext.predict_soft(v)
    vid = volume_digest(v)
    from ttaseg.volcore import save_svol

    bad = ProbMap(np.zeros((4, 4, 5), np.float32), UNIT)
    save_svol(bad, job / "preds" / f"{vid}.svol")
    with pytest.raises(GeometryError):
        ext.predict_soft(v)
    save_svol(Mask(np.zeros((4, 4, 4), bool), UNIT), job / "preds" / f"{vid}.svol")
    with pytest.raises(ValidationError):
        ext.predict_soft(v)


def test_external_matches_in_process_through_tta(tmp_path, rng):
    cases = [blob_case(rng, "c0", shape=(12, 12, 12))]
    model = ToySegmenter.train(cases, FAST, seed=8)
    v = cases[0].volume
    ens = enumerate_transforms(4, 3)

    job = tmp_path / "job"
    ext = ExternalSegmenter(job)
    with pytest.raises(PredictionsPending):
        tta_infer(ext, v, ens)
    # keep answering until every augmented input has a prediction
    for _ in range(ens.size + 1):
        answer_pending(job, model)
        try:
            got = tta_infer(ext, v, ens)
            break
        except PredictionsPending:
            continue
    want = tta_infer(model, v, ens)
    assert len(got) == len(want)
    for g, w in zip(got, want):
        assert g.data.tobytes() == w.data.tobytes()
