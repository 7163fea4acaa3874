from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from scipy.special import expit

from ttaseg.exceptions import PauseRequested
from ttaseg.tta import (
    IntensityOp,
    TtaConfig,
    TtaEnsemble,
    TtaInferenceError,
    TtaTransform,
    apply_fwd,
    apply_inv_geom,
    ensemble_from_manifest,
    ensemble_to_manifest,
    enumerate_transforms,
    identity_transform,
    load_ensemble,
    save_ensemble,
    tta_infer,
)
from ttaseg.volcore import ProbMap, Volume

SHAPE = (4, 5, 6)  # non-cubic on purpose: catches axis mixups


def rand_volume(rng, shape=SHAPE, spacing=(1.0, 2.0, 3.0)):
    return Volume(rng.normal(size=shape).astype(np.float32), spacing)


class PointwiseSeg:
    """Voxelwise function of intensity only; commutes with voxel permutations."""

    def predict_soft(self, v: Volume) -> ProbMap:
        return ProbMap(expit(v.data).astype(np.float32), v.spacing_mm)


def geom_only(t: TtaTransform) -> TtaTransform:
    return dataclasses.replace(t, intensity_op=IntensityOp())


# --- enumeration ----------------------------------------------------------


def test_enumerate_is_deterministic():
    a = enumerate_transforms(16, 7)
    b = enumerate_transforms(16, 7)
    assert ensemble_to_manifest(a) == ensemble_to_manifest(b)


def test_enumerate_seeds_differ():
    a = enumerate_transforms(16, 7)
    b = enumerate_transforms(16, 8)
    assert ensemble_to_manifest(a) != ensemble_to_manifest(b)


def test_enumerate_shape_and_identity_head():
    e = enumerate_transforms(16, 0)
    assert e.size == 16
    assert [t.id for t in e.transforms] == list(range(16))
    assert e.transforms[0].is_identity()
    # non-identity members must differ geometrically from one another
    geoms = {(t.flip_axes, t.rot90_k, t.transpose_yx) for t in e.transforms}
    assert len(geoms) == 16


def test_enumerate_minimum_size():
    with pytest.raises(ValueError):
        enumerate_transforms(1, 0)
    e = enumerate_transforms(2, 0)
    assert e.size == 2


def test_enumerate_respects_ranges():
    cfg = TtaConfig()
    e = enumerate_transforms(64, 3)
    for t in e.transforms:
        op = t.intensity_op
        if op.kind == "gamma":
            assert cfg.gamma_range[0] <= op.gamma <= cfg.gamma_range[1]
        elif op.kind == "linear":
            assert cfg.scale_range[0] <= op.scale <= cfg.scale_range[1]
            assert cfg.shift_range[0] <= op.shift <= cfg.shift_range[1]


def test_ensemble_invariants():
    with pytest.raises(ValueError):
        TtaEnsemble([])
    with pytest.raises(ValueError):
        TtaEnsemble([identity_transform(0), identity_transform(0)])
    with pytest.raises(ValueError):
        TtaEnsemble([TtaTransform(id=0, rot90_k=1)])
    diag = TtaEnsemble([identity_transform(0)])
    assert diag.size == 1


def test_transform_validation():
    with pytest.raises(ValueError):
        TtaTransform(id=0, flip_axes=("w",))
    with pytest.raises(ValueError):
        TtaTransform(id=0, rot90_k=4)
    with pytest.raises(ValueError):
        IntensityOp(kind="log")
    with pytest.raises(ValueError):
        IntensityOp(kind="gamma", gamma=0.0)


# --- intensity ops ---------------------------------------------------------


def test_identity_parameters_are_bit_exact(rng):
    v = rand_volume(rng)
    for op in (IntensityOp(), IntensityOp(kind="gamma", gamma=1.0), IntensityOp(kind="linear")):
        t = TtaTransform(id=0, intensity_op=op)
        out = apply_fwd(t, v)
        assert out.data.tobytes() == v.data.tobytes()
        assert out.spacing_mm == v.spacing_mm


def test_gamma_preserves_range_and_order(rng):
    v = rand_volume(rng)
    t = TtaTransform(id=0, intensity_op=IntensityOp(kind="gamma", gamma=1.4))
    out = apply_fwd(t, v)
    assert out.data.min() == pytest.approx(v.data.min(), abs=1e-6)
    assert out.data.max() == pytest.approx(v.data.max(), abs=1e-6)
    flat_in = np.argsort(v.data.ravel(), kind="stable")
    flat_out = np.argsort(out.data.ravel(), kind="stable")
    assert (flat_in == flat_out).all()


def test_intensity_on_constant_volume_is_noop():
    v = Volume(np.full(SHAPE, 3.25, dtype=np.float32), (1, 1, 1))
    t = TtaTransform(id=0, intensity_op=IntensityOp(kind="gamma", gamma=0.8))
    assert apply_fwd(t, v).data.tobytes() == v.data.tobytes()


# --- geometry --------------------------------------------------------------


def all_geom_transforms():
    out = [identity_transform(0)]
    i = 1
    for f in ((), ("z",), ("y",), ("x",), ("y", "z"), ("x", "z"), ("x", "y"), ("x", "y", "z")):
        for k in range(4):
            for tp in (False, True):
                if not f and k == 0 and not tp:
                    continue
                out.append(TtaTransform(id=i, flip_axes=f, rot90_k=k, transpose_yx=tp))
                i += 1
    return out


def test_geometric_roundtrip_all_64_combos(rng):
    v = rand_volume(rng)
    for t in all_geom_transforms():
        tv = apply_fwd(t, v)
        p = ProbMap(np.clip(np.abs(tv.data) / (np.abs(tv.data).max() + 1), 0, 1), tv.spacing_mm)
        q = apply_inv_geom(t, p)
        assert q.shape == v.shape
        assert q.spacing_mm == v.spacing_mm
        # invert the volume itself through the prob-map path
        pv = ProbMap(np.zeros(tv.shape, np.float32), tv.spacing_mm)
        assert apply_inv_geom(t, pv).shape == v.shape


def test_roundtrip_bit_identical_random_pairs(rng):
    # enumerated transforms carry intensity ops; the geometric part must invert exactly
    e = enumerate_transforms(64, 11)
    for trial in range(50):
        t = e.transforms[int(rng.integers(e.size))]
        data = rng.random(size=SHAPE).astype(np.float32)
        v = Volume(data, (0.8, 1.9, 3.1))
        tv = apply_fwd(geom_only(t), v)
        p = ProbMap(tv.data, tv.spacing_mm)
        q = apply_inv_geom(t, p)
        assert q.data.tobytes() == data.tobytes()
        assert q.spacing_mm == v.spacing_mm


def test_spacing_follows_axis_permutation(rng):
    v = rand_volume(rng, spacing=(1.0, 2.0, 3.0))
    rot = TtaTransform(id=0, rot90_k=1)
    assert apply_fwd(rot, v).spacing_mm == (1.0, 3.0, 2.0)
    tp = TtaTransform(id=0, transpose_yx=True)
    assert apply_fwd(tp, v).spacing_mm == (1.0, 3.0, 2.0)
    both = TtaTransform(id=0, rot90_k=1, transpose_yx=True)
    assert apply_fwd(both, v).spacing_mm == (1.0, 2.0, 3.0)
    flip = TtaTransform(id=0, flip_axes=("z",))
    assert apply_fwd(flip, v).spacing_mm == (1.0, 2.0, 3.0)


def test_flip_is_involution(rng):
    v = rand_volume(rng)
    t = TtaTransform(id=0, flip_axes=("z", "x"))
    twice = apply_fwd(t, apply_fwd(t, v))
    assert twice.data.tobytes() == v.data.tobytes()


# --- tta_infer --------------------------------------------------------------


def test_tta_infer_pointwise_segmenter_is_geometry_invariant(rng):
    # a voxelwise model commutes with voxel permutations, so every
    # geometry-only member must produce the identical inverted prediction
    v = rand_volume(rng)
    ens = TtaEnsemble(all_geom_transforms())
    preds = tta_infer(PointwiseSeg(), v, ens)
    assert len(preds) == ens.size
    ref = preds[0]
    assert ref.data.tobytes() == PointwiseSeg().predict_soft(v).data.tobytes()
    for p in preds[1:]:
        assert p.data.tobytes() == ref.data.tobytes()
        assert p.spacing_mm == ref.spacing_mm


def test_tta_infer_single_member_diag(rng):
    v = rand_volume(rng)
    preds = tta_infer(PointwiseSeg(), v, TtaEnsemble([identity_transform(0)]))
    assert len(preds) == 1
    assert preds[0].data.tobytes() == PointwiseSeg().predict_soft(v).data.tobytes()


def test_tta_infer_wraps_failures_with_member_id(rng):
    v = rand_volume(rng)
    ens = enumerate_transforms(4, 0)

    class BadShape:
        def predict_soft(self, vol):
            return ProbMap(np.zeros((2, 2, 2), np.float32), vol.spacing_mm)

    with pytest.raises(TtaInferenceError) as ei:
        tta_infer(BadShape(), v, ens)
    assert ei.value.transform_id == 0

    class Boom:
        def __init__(self):
            self.calls = 0

        def predict_soft(self, vol):
            self.calls += 1
            if self.calls >= 3:
                raise RuntimeError("flaky member")
            return ProbMap(np.zeros(vol.shape, np.float32), vol.spacing_mm)

    with pytest.raises(TtaInferenceError) as ei:
        tta_infer(Boom(), v, ens)
    assert ei.value.transform_id == 2


def test_tta_infer_lets_pause_through(rng):
    v = rand_volume(rng)

    class Pausing:
        def predict_soft(self, vol):
            raise PauseRequested("waiting on external predictions")

    with pytest.raises(PauseRequested):
        tta_infer(Pausing(), v, enumerate_transforms(2, 0))


# --- manifest ----------------------------------------------------------------


def test_manifest_roundtrip(tmp_path):
    e = enumerate_transforms(16, 42)
    path = tmp_path / "ensemble.json"
    save_ensemble(e, path)
    back = load_ensemble(path)
    assert back.transforms == e.transforms
    assert ensemble_from_manifest(ensemble_to_manifest(e)).transforms == e.transforms
