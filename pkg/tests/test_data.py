import numpy as np
import pytest
from PIL import Image

from nllinknet.data import (
    Sample,
    SynthConfig,
    crop,
    load_mask,
    load_sample,
    read_dataset,
    stack_samples,
    synth_generate,
    write_dataset,
)
from nllinknet.errors import (
    ConfigurationError,
    DataError,
    DimensionMismatchError,
    NonGrayscaleMaskError,
    ShapeError,
    UnreadableImageError,
)


def test_synth_shapes_and_values():
    samples = synth_generate(SynthConfig(seed=1), 6)
    for s in samples:
        assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
        assert s.mask.shape == s.occlusion.shape == (1, 64, 64)
        assert 0 <= s.image.min() and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
    assert len({s.id for s in samples}) == 6


def test_synth_deterministic_and_index_addressable():
    cfg = SynthConfig(seed=7)
    a = synth_generate(cfg, 5)
    b = synth_generate(cfg, 2, start=3)
    for x, y in zip(a[3:], b):
        assert x.id == y.id
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.mask, y.mask)
    c = synth_generate(SynthConfig(seed=8), 1)
    assert not np.array_equal(a[0].mask, c[0].mask)


def test_synth_occlusion_lies_on_road_and_road_fraction():
    cfg = SynthConfig(seed=3)
    lo, hi = cfg.road_fraction
    for s in synth_generate(cfg, 40):
        assert np.all(s.occlusion <= s.mask)
        assert lo <= s.mask.mean() <= hi
        assert s.occlusion.sum() > 0


def test_synth_occluders_hide_road_in_image():
    # occluded road pixels should not look like visible road on average
    s = synth_generate(SynthConfig(seed=0, noise=0.0), 10)
    vis = np.concatenate([x.image[:, (x.mask[0] > 0) & (x.occlusion[0] == 0)] for x in s], axis=1)
    occ = np.concatenate([x.image[:, x.occlusion[0] > 0] for x in s], axis=1)
    assert np.abs(vis.mean(axis=1) - occ.mean(axis=1)).max() > 0.1


@pytest.mark.parametrize("kw", [{"size": 48}, {"road_width": (4, 2)}, {"road_width": (0.5, 2)}])
def test_synth_config_validation(kw):
    with pytest.raises(ConfigurationError):
        SynthConfig(**kw)


def test_dataset_round_trip(tmp_path):
    samples = synth_generate(SynthConfig(seed=2), 3)
    write_dataset(tmp_path, samples)
    back = read_dataset(tmp_path)
    assert [s.id for s in back] == [s.id for s in samples]
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(a.occlusion, b.occlusion)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6


def test_read_dataset_errors(tmp_path):
    with pytest.raises(DataError):
        read_dataset(tmp_path)
    (tmp_path / "index.txt").write_text("\n")
    with pytest.raises(DataError):
        read_dataset(tmp_path)


def test_load_sample_errors(tmp_path):
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "img.png")
    Image.fromarray(np.zeros((8, 6), np.uint8)).save(tmp_path / "small.png")
    rgb = np.zeros((8, 8, 3), np.uint8)
    rgb[..., 0] = 255
    Image.fromarray(rgb).save(tmp_path / "color.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(DimensionMismatchError):
        load_sample(tmp_path / "img.png", tmp_path / "small.png")
    with pytest.raises(NonGrayscaleMaskError):
        load_sample(tmp_path / "img.png", tmp_path / "color.png")
    with pytest.raises(UnreadableImageError):
        load_sample(tmp_path / "junk.png", tmp_path / "small.png")
    with pytest.raises(UnreadableImageError):
        load_mask(tmp_path / "missing.png")


def test_mask_binarized_at_128(tmp_path):
    Image.fromarray(np.array([[0, 127, 128, 255]], np.uint8)).save(tmp_path / "m.png")
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), [[[0, 0, 1, 1]]])


def test_gray_rgb_mask_accepted(tmp_path):
    Image.fromarray(np.full((2, 2, 3), 200, np.uint8)).save(tmp_path / "m.png")
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), np.ones((1, 2, 2)))


def test_crop(rng):
    s = synth_generate(SynthConfig(seed=0), 1)[0]
    c = crop(s, 10, 5, 32)
    np.testing.assert_array_equal(c.image, s.image[:, 5:37, 10:42])
    np.testing.assert_array_equal(c.occlusion, s.occlusion[:, 5:37, 10:42])
    with pytest.raises(ShapeError):
        crop(s, 40, 0, 32)


def test_sample_validation():
    with pytest.raises(ShapeError):
        Sample(np.zeros((3, 4, 4)), np.zeros((1, 4, 5)))
    with pytest.raises(ShapeError):
        Sample(np.zeros((3, 4, 4)), np.zeros((2, 4, 4)))


def test_stack_samples():
    samples = synth_generate(SynthConfig(seed=0), 3)
    images, masks = stack_samples(samples)
    assert images.shape == (3, 3, 64, 64) and masks.shape == (3, 1, 64, 64)
