import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nllinknet import tensor as T
from nllinknet.data import Sample, SynthConfig, synth_generate
from nllinknet.errors import ConfigurationError, NonFiniteError, ShapeError
from nllinknet.gradcheck import grad_check
from nllinknet.network import ModelConfig
from nllinknet.tensor import Tensor
from nllinknet.training import (
    Adam,
    AugmentConfig,
    OptimState,
    ScheduleState,
    TrainConfig,
    adam_step,
    augment,
    bce_loss,
    format_loss_log,
    lr_grid,
    plateau_step,
    rescale_sample,
    shift_sample,
    sweep_lr,
    train,
)


def bce_loop(p, t):
    total = 0.0
    for pi, ti in zip(np.ravel(p), np.ravel(t)):
        pi = min(max(pi, 1e-7), 1 - 1e-7)
        total -= ti * math.log(pi) + (1 - ti) * math.log(1 - pi)
    return total / np.size(p)


@pytest.mark.parametrize("target", [0.0, 1.0])
def test_bce_half_is_ln2(target):
    p = Tensor(np.full((2, 1, 4, 4), 0.5))
    assert abs(bce_loss(p, np.full((2, 1, 4, 4), target)).item() - math.log(2)) <= 1e-6


def test_bce_matches_loop(rng):
    p = rng.random((2, 1, 5, 5))
    t = (rng.random((2, 1, 5, 5)) < 0.4).astype(float)
    assert bce_loss(Tensor(p), t).item() == pytest.approx(bce_loop(p, t), rel=1e-12)


def test_bce_clamps_extremes():
    p = Tensor(np.array([0.0, 1.0]))
    v = bce_loss(p, np.array([1.0, 0.0])).item()
    assert math.isfinite(v) and v == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_bce_gradient(rng):
    p = Tensor(rng.uniform(0.05, 0.95, size=(1, 1, 3, 3)))
    t = (rng.random((1, 1, 3, 3)) < 0.5).astype(float)
    assert grad_check(lambda: bce_loss(p, t), {"p": p}).passed


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        bce_loss(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))


def test_adam_first_step_hand_example():
    # first step moves each weight by lr * sign(g) up to eps
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    state = OptimState(lr=1e-3)
    adam_step({"w": p}, {"w": g}, state)
    expected = np.array([1.0, -2.0, 0.5]) - 1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p, expected, rtol=1e-12)
    assert p[0] == pytest.approx(0.999, abs=1e-10)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    p = rng.normal(size=4)
    ref = p.copy()
    m = v = np.zeros(4)
    state = OptimState(lr=0.01)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step({"w": p}, {"w": g}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-12)


def test_adam_rejects_non_finite_and_names_parameter():
    with pytest.raises(NonFiniteError, match="decoder.w"):
        adam_step({"decoder.w": np.zeros(2)}, {"decoder.w": np.array([np.nan, 0.0])}, OptimState())


def test_adam_class_skips_missing_grads():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = Adam([("a", a), ("b", b)], lr=0.1)
    a.grad = np.array([1.0, -1.0])
    opt.step()
    np.testing.assert_allclose(a.data, [0.9, 1.1])
    np.testing.assert_array_equal(b.data, [1.0, 1.0])


def test_plateau_constant_loss_decays_at_patience():
    s = ScheduleState(lr=1.0)
    lrs = [plateau_step(s, 0.5) for _ in range(8)]
    # call 0 sets the best, calls 1..3 do not improve
    assert lrs == [1.0, 1.0, 1.0, 0.2, 0.2, 0.2, pytest.approx(0.04), pytest.approx(0.04)]


def test_plateau_decay_factor_exact():
    s = ScheduleState(lr=3e-4)
    for _ in range(4):
        plateau_step(s, 1.0)
    assert s.lr == 3e-4 * 0.2


def test_plateau_improvement_resets_and_threshold():
    s = ScheduleState(lr=1.0, threshold=1e-3)
    plateau_step(s, 1.0)
    plateau_step(s, 0.9995)  # below threshold: not an improvement
    plateau_step(s, 0.5)
    plateau_step(s, 0.5)
    plateau_step(s, 0.5)
    assert s.lr == 1.0
    plateau_step(s, 0.5)
    assert s.lr == pytest.approx(0.2)


def test_plateau_min_lr():
    s = ScheduleState(lr=2e-7, patience=1)
    for _ in range(5):
        plateau_step(s, 1.0)
    assert s.lr == 1e-7


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        ScheduleState(factor=1.5)
    with pytest.raises(ConfigurationError):
        ScheduleState(patience=0)


def sample(rng, size=16):
    mask = (rng.random((1, size, size)) < 0.3).astype(np.float32)
    return Sample(rng.random((3, size, size)).astype(np.float32), mask, "s", mask.copy())


def test_shift_inverse_on_interior(rng):
    s = sample(rng)
    back = shift_sample(shift_sample(s, 3, -2), -3, 2)
    np.testing.assert_array_equal(back.image[:, 2:-2, 3:-3], s.image[:, 2:-2, 3:-3])
    np.testing.assert_array_equal(back.mask[:, :2], 0)


def test_augment_off_is_identity(rng):
    s = sample(rng)
    out = augment(s, AugmentConfig.off(), np.random.default_rng(0))
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.mask, s.mask)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_augment_keeps_image_and_mask_aligned(seed):
    rng = np.random.default_rng(seed)
    size = 16
    mask = (rng.random((1, size, size)) < 0.3).astype(np.float32)
    image = np.repeat(mask, 3, axis=0)  # image carries the mask in every channel
    s = Sample(image, mask, "s", mask.copy())
    out = augment(s, AugmentConfig(scale_range=(1.0, 1.0)), np.random.default_rng(seed))
    assert out.image.shape == (3, size, size) and out.mask.shape == (1, size, size)
    np.testing.assert_array_equal(out.image[0], out.mask[0])
    np.testing.assert_array_equal(out.occlusion, out.mask)
    assert set(np.unique(out.mask)) <= {0.0, 1.0}


def test_double_flip_involution(rng):
    s = sample(rng)
    cfg = AugmentConfig(hflip=True, vflip=True, max_shift=0, scale_range=(1.0, 1.0))

    class Always:
        def random(self, n):
            return np.zeros(n)

        def integers(self, lo, hi, size):
            return np.zeros(size, dtype=int)

        def uniform(self, lo, hi):
            return 1.0

    once = augment(s, cfg, Always())
    np.testing.assert_array_equal(once.image, s.image[:, ::-1, ::-1])
    twice = augment(once, cfg, Always())
    np.testing.assert_array_equal(twice.image, s.image)


def test_rescale_keeps_size_and_binary_mask(rng):
    s = sample(rng)
    for scale in (0.9, 1.1):
        out = rescale_sample(s, scale)
        assert out.size == s.size
        assert set(np.unique(out.mask)) <= {0.0, 1.0}


def test_format_loss_log():
    assert format_loss_log([(1, 0.5, 3e-4), (2, 0.25, 6e-5)]) == "1\t0.50000000\t0.0003\n2\t0.25000000\t6e-05\n"


def test_lr_grid():
    g = lr_grid()
    assert len(g) == 91 and g[0] == 1e-4 and g[-1] == 1e-3 and g[1] == 1.1e-4


TINY = ModelConfig(variant="nl34", width=Fraction(1, 8))


def tiny_data(n=4, size=32):
    return synth_generate(SynthConfig(size=size, seed=5), n)


def test_train_smoke_writes_artifacts(tmp_path):
    res = train(TINY, tiny_data(), TrainConfig(epochs=2, batch_size=2), out_dir=tmp_path)
    assert [e for e, _, _ in res.log] == [1, 2]
    assert (tmp_path / "model.ckpt").exists()
    assert (tmp_path / "loss.log").read_text() == format_loss_log(res.log)


def test_train_is_deterministic():
    a = train(TINY, tiny_data(), TrainConfig(epochs=2, batch_size=2, seed=3))
    b = train(TINY, tiny_data(), TrainConfig(epochs=2, batch_size=2, seed=3))
    assert a.log == b.log


def test_train_reduces_loss_by_half():
    data = synth_generate(SynthConfig(size=32, seed=1), 16)
    res = train(ModelConfig(variant="baseline", width=Fraction(1, 8)), data,
                TrainConfig(epochs=30, batch_size=8, lr=1e-3, augment=AugmentConfig.off()))
    first, last = res.log[0][1], res.log[-1][1]
    assert last <= 0.5 * first


def test_train_non_finite_loss_names_batch(tmp_path):
    data = tiny_data(2)
    data[1].image[...] = np.nan
    with pytest.raises(NonFiniteError, match="batch"):
        train(TINY, data, TrainConfig(epochs=1, batch_size=1, augment=AugmentConfig.off()), out_dir=tmp_path)
    assert (tmp_path / "last_batch.txt").read_text().strip() == "1"


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0)


def test_sweep_lr_returns_pairs():
    out = sweep_lr(TINY, tiny_data(2), TrainConfig(epochs=1, batch_size=2), [1e-4, 2e-4])
    assert [lr for lr, _ in out] == [1e-4, 2e-4]
    assert all(math.isfinite(v) for _, v in out)
