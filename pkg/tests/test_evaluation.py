import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nllinknet.data import SynthConfig, load_mask, synth_generate
from nllinknet.errors import ConfigurationError, DataError, ShapeError
from nllinknet.evaluation import (
    TtaConfig,
    confusion,
    evaluate,
    miou,
    occluded_confusion,
    road_iou,
    tta_predict,
    tta_variants,
    tta_votes,
)
from nllinknet.network import ModelConfig, build_model
from nllinknet.transforms import (
    DIHEDRAL,
    center_fit,
    hflip,
    resize_bilinear,
    resize_nearest,
    shift,
    vflip,
)


def test_iou_one_third():
    pred = np.array([[1, 1, 0, 0]])
    gt = np.array([[0, 1, 1, 0]])
    assert confusion(pred, gt) == (1, 1, 1)
    assert road_iou(pred, gt) == pytest.approx(1 / 3)


def test_iou_empty_is_one():
    assert road_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_miou_is_per_image_mean():
    a = (np.ones((2, 2)), np.ones((2, 2)))
    b = (np.array([[1, 1, 0, 0]]), np.array([[0, 1, 1, 0]]))
    rep = miou([a, b], ["a", "b"])
    assert rep.miou == pytest.approx(2 / 3)
    assert rep.global_iou == pytest.approx(5 / 7)
    assert [r["id"] for r in rep.per_image] == ["a", "b"]


def test_metric_errors():
    with pytest.raises(DataError):
        road_iou(np.array([[0.5]]), np.array([[1]]))
    with pytest.raises(ShapeError):
        road_iou(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DataError):
        miou([])


def test_occluded_confusion():
    pred = np.array([[1, 0, 1, 0]])
    gt = np.array([[1, 1, 1, 0]])
    occ = np.array([[0, 1, 1, 0]])
    assert occluded_confusion(pred, gt, occ) == (1, 0, 1)


def test_report_serialization():
    rep = miou([(np.ones((2, 2)), np.ones((2, 2)))], ["x"], {"k": 1})
    data = json.loads(rep.to_json())
    assert data["miou"] == 1.0 and data["config"] == {"k": 1}
    assert "mIOU" in rep.to_text()


# transforms


def test_dihedral_group_has_eight_distinct_elements(rng):
    a = rng.random((5, 5))
    outs = {d.apply(a).tobytes() for d in DIHEDRAL}
    assert len(DIHEDRAL) == 8 and len(outs) == 8
    assert len({d.name for d in DIHEDRAL}) == 8


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), side=st.integers(1, 9), channels=st.integers(1, 3))
def test_dihedral_inverse_is_identity(seed, side, channels):
    a = np.random.default_rng(seed).random((channels, side, side))
    for d in DIHEDRAL:
        np.testing.assert_array_equal(d.invert(d.apply(a)), a)
        np.testing.assert_array_equal(d.apply(d.invert(a)), a)


def test_named_flips_match_group(rng):
    a = rng.random((4, 4))
    by_name = {d.name: d for d in DIHEDRAL}
    np.testing.assert_array_equal(by_name["hflip"].apply(a), hflip(a))
    np.testing.assert_array_equal(by_name["vflip"].apply(a), vflip(a))
    np.testing.assert_array_equal(by_name["rot180"].apply(a), hflip(vflip(a)))


def test_shift_zero_fill():
    a = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(shift(a, 1, 0), [[0, 0, 1], [0, 3, 4], [0, 6, 7]])
    np.testing.assert_array_equal(shift(a, 0, -1), [[3, 4, 5], [6, 7, 8], [0, 0, 0]])
    assert not shift(a, 5, 0).any()


def test_resize_constant_and_identity(rng):
    np.testing.assert_allclose(resize_bilinear(np.full((2, 4, 4), 0.3), 6, 3), 0.3)
    a = rng.random((4, 4))
    np.testing.assert_array_equal(resize_bilinear(a, 4, 4), a)
    np.testing.assert_array_equal(resize_nearest(resize_nearest(a, 8, 8), 4, 4), a)


def test_resize_upsample_2x_pixel_centres():
    up = resize_bilinear(np.array([[0.0, 1.0]]), 1, 4)
    np.testing.assert_allclose(up, [[0.0, 0.25, 0.75, 1.0]])


def test_center_fit():
    a = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(center_fit(a, 2, 2), [[5, 6], [9, 10]])
    padded = center_fit(a, 6, 6)
    np.testing.assert_array_equal(padded[1:5, 1:5], a)
    assert padded.sum() == a.sum()


# test-time augmentation


def const(value):
    return lambda batch: np.full((batch.shape[0], 1) + batch.shape[2:], value)


def test_variant_counts_and_thresholds():
    assert TtaConfig().variant_count == 8 and TtaConfig().vote_threshold == 4
    ms = TtaConfig(multi_scale=True)
    assert ms.variant_count == 24 and ms.vote_threshold == 12


def test_tta_variants_invert():
    img = np.random.default_rng(0).random((3, 8, 8))
    vs = tta_variants(img)
    assert len(vs) == 8
    for v, d in vs:
        np.testing.assert_array_equal(d.invert(v), img)
    with pytest.raises(ShapeError):
        tta_variants(np.zeros((3, 8, 4)))


@pytest.mark.parametrize("multi", [False, True])
def test_constant_predictors(multi):
    cfg = TtaConfig(multi_scale=multi)
    img = np.zeros((3, 128, 128))
    assert tta_predict(const(0.9), img, cfg).all()
    assert not tta_predict(const(0.1), img, cfg).any()
    assert tta_votes(const(0.9), img, cfg).max() == cfg.variant_count
    out = tta_predict(const(0.9), img, cfg)
    assert out.dtype == np.uint8 and out.shape == (128, 128)


@pytest.mark.parametrize("yes,expected", [(4, 1), (3, 0), (5, 1)])
def test_vote_threshold_boundary(yes, expected):
    def stub(batch):
        out = np.zeros((batch.shape[0], 1) + batch.shape[2:])
        out[:yes] = 1.0
        return out

    mask = tta_predict(stub, np.zeros((3, 32, 32)))
    assert np.all(mask == expected)


def test_ground_truth_lookup_is_recovered():
    # a predictor that reads the answer from the (transformed) input is exact
    s = synth_generate(SynthConfig(seed=4), 1)[0]
    img = np.concatenate([s.mask, s.mask, s.mask])

    def lookup(batch):
        return batch[:, :1]

    np.testing.assert_array_equal(tta_predict(lookup, img), s.mask[0])


def test_orientation_biased_predictor_is_symmetrized(rng):
    # predicts road only in the top half of whatever it sees; every pixel gets exactly 4 votes
    def top_half(batch):
        out = np.zeros((batch.shape[0], 1) + batch.shape[2:])
        out[:, :, : batch.shape[2] // 2] = 1
        return out

    votes = tta_votes(top_half, np.zeros((3, 32, 32)))
    assert np.all(votes == 4)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000), t1=st.floats(0.05, 0.95), t2=st.floats(0.05, 0.95))
def test_votes_monotone_in_binarize_threshold(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    field = np.random.default_rng(seed).random((32, 32))

    def predictor(batch):
        return np.broadcast_to(field, (batch.shape[0], 1, 32, 32)) * batch[:, :1]

    img = np.ones((3, 32, 32))
    v_lo = tta_votes(predictor, img, TtaConfig(binarize=lo))
    v_hi = tta_votes(predictor, img, TtaConfig(binarize=hi))
    assert np.all(v_hi <= v_lo)


def test_tta_size_errors():
    with pytest.raises(ConfigurationError, match="valid sides"):
        tta_predict(const(1.0), np.zeros((3, 32, 32)), TtaConfig(multi_scale=True))
    with pytest.raises(ShapeError):
        tta_predict(const(1.0), np.zeros((3, 32, 64)))
    with pytest.raises(ShapeError):
        tta_predict(const(1.0), np.zeros((32, 32)))


def test_evaluate_with_model_writes_outputs(tmp_path):
    data = synth_generate(SynthConfig(seed=9), 2)
    model = build_model(ModelConfig(variant="nl34", width="1/8"))
    rep = evaluate(model, data, TtaConfig(), tmp_path)
    assert len(rep.per_image) == 2 and 0 <= rep.miou <= 1
    assert json.loads((tmp_path / "report.json").read_text())["config"]["variants"] == 8
    for s in data:
        assert load_mask(tmp_path / "masks" / f"{s.id}.png").shape == (1, 64, 64)
    again = evaluate(model, data, TtaConfig(), tmp_path / "again")
    assert (tmp_path / "report.json").read_bytes() == (tmp_path / "again" / "report.json").read_bytes()
