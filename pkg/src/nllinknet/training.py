"""Loss, optimizer, learning-rate schedule, augmentation and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import Sample, stack_samples
from .errors import ConfigurationError, DataError, NonFiniteError, ShapeError
from .network import ModelConfig, NLLinkNet, build_model
from .tensor import Tensor
from .transforms import center_fit, resize_bilinear, resize_nearest, shift

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [1e-7, 1 - 1e-7]."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"bce_loss: prediction {pred.shape} and target {t.shape} differ")
    p = pred.data
    inside = T.branch((p >= PROB_CLAMP) & (p <= 1 - PROB_CLAMP))
    pc = np.where(inside, p, np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP))
    n = p.size
    loss = -(t * np.log(pc) + (1 - t) * np.log1p(-pc)).mean()

    def backward(g):
        return (g * inside * (pc - t) / (pc * (1 - pc) * n),)

    return Tensor.from_op(np.asarray(loss, dtype=pred.dtype), (pred,), backward)


# Adam


@dataclass
class OptimState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimState) -> None:
    """One bias-corrected Adam update, in place on the arrays in ``params``.

    Parameters without a gradient entry are skipped.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, named_params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.state = OptimState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        adam_step({n: p.data for n, p in self.params}, {n: p.grad for n, p in self.params}, self.state)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


# plateau schedule


@dataclass
class ScheduleState:
    lr: float = 3e-4
    factor: float = 0.2
    patience: int = 3
    threshold: float = 1e-5
    min_lr: float = 1e-7
    best: float = math.inf
    bad_epochs: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ConfigurationError(f"decay factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")


def plateau_step(state: ScheduleState, loss: float) -> float:
    """Record one epoch loss; decay lr after ``patience`` epochs without improvement."""
    if loss < state.best - state.threshold:
        state.best = loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.lr = max(state.lr * state.factor, state.min_lr)
            state.bad_epochs = 0
    return state.lr


# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    hflip: bool = True
    vflip: bool = True
    max_shift: int = 4
    scale_range: tuple = (0.9, 1.1)

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(hflip=False, vflip=False, max_shift=0, scale_range=(1.0, 1.0))

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"invalid scale range {self.scale_range}")
        if self.max_shift < 0:
            raise ConfigurationError("max_shift must be >= 0")


def _map_sample(sample: Sample, image_fn, mask_fn) -> Sample:
    occ = None if sample.occlusion is None else mask_fn(sample.occlusion)
    return Sample(np.ascontiguousarray(image_fn(sample.image)), np.ascontiguousarray(mask_fn(sample.mask)),
                  sample.id, None if occ is None else np.ascontiguousarray(occ))


def shift_sample(sample: Sample, dx: int, dy: int) -> Sample:
    return _map_sample(sample, lambda a: shift(a, dx, dy), lambda a: shift(a, dx, dy))


def rescale_sample(sample: Sample, scale: float) -> Sample:
    """Resize by ``scale`` then center-crop or zero-pad back to the original size."""
    h, w = sample.size
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    if (nh, nw) == (h, w):
        return sample
    return _map_sample(
        sample,
        lambda a: center_fit(resize_bilinear(a, nh, nw), h, w),
        lambda a: center_fit(resize_nearest(a, nh, nw), h, w),
    )


def augment(sample: Sample, config: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Random flips, shift and rescale; image and masks get the same geometry.

    The draws happen in a fixed order whatever the flags, so enabling one
    transform does not reshuffle the others.
    """
    do_h, do_v = rng.random(2) < 0.5
    dx, dy = rng.integers(-config.max_shift, config.max_shift + 1, size=2)
    scale = rng.uniform(*config.scale_range) if config.scale_range[0] < config.scale_range[1] else config.scale_range[0]
    out = sample
    if config.hflip and do_h:
        out = _map_sample(out, lambda a: a[..., ::-1], lambda a: a[..., ::-1])
    if config.vflip and do_v:
        out = _map_sample(out, lambda a: a[..., ::-1, :], lambda a: a[..., ::-1, :])
    if config.max_shift and (dx or dy):
        out = shift_sample(out, int(dx), int(dy))
    if scale != 1.0:
        out = rescale_sample(out, float(scale))
    return out


# training loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 3e-4
    patience: int = 3
    factor: float = 0.2
    threshold: float = 1e-5
    min_lr: float = 1e-7
    augment: AugmentConfig = AugmentConfig()
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch size must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")


@dataclass
class TrainResult:
    model: NLLinkNet
    log: list  # (epoch, loss, lr) with lr the rate used during that epoch
    checkpoint: Optional[Path] = None

    def log_text(self) -> str:
        return format_loss_log(self.log)


def format_loss_log(log) -> str:
    return "".join(f"{epoch}\t{loss:.8f}\t{lr:.6g}\n" for epoch, loss, lr in log)


def train(model_config: ModelConfig, dataset: Sequence[Sample], config: TrainConfig,
          out_dir=None, model: NLLinkNet | None = None) -> TrainResult:
    """Train from scratch (or continue ``model``) and optionally write artifacts.

    With ``out_dir`` set, writes ``model.ckpt`` and ``loss.log`` there.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    model = model if model is not None else build_model(model_config)
    model.train()
    opt = Adam(model.named_parameters(), lr=config.lr)
    sched = ScheduleState(lr=config.lr, factor=config.factor, patience=config.patience,
                          threshold=config.threshold, min_lr=config.min_lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    log = []
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        total, count = 0.0, 0
        lr_used = opt.lr
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [augment(dataset[i], config.augment, rng) for i in idx]
            images, masks = stack_samples(batch)
            opt.zero_grad()
            loss = bce_loss(model(Tensor(images.astype(model.dtype))), masks)
            value = loss.item()
            if not math.isfinite(value):
                if out_dir is not None:
                    (out_dir / "last_batch.txt").write_text(" ".join(str(int(i)) for i in idx) + "\n")
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch indices {idx.tolist()}")
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        epoch_loss = total / count
        log.append((epoch, epoch_loss, lr_used))
        opt.lr = plateau_step(sched, epoch_loss)
        logger.info("epoch %d loss %.6f lr %.3g", epoch, epoch_loss, lr_used)

    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "model.ckpt"
        save_checkpoint(model, ckpt)
        (out_dir / "loss.log").write_text(format_loss_log(log))
    return TrainResult(model, log, ckpt)


def lr_grid(low: float = 1e-4, high: float = 1e-3, step: float = 1e-5) -> list:
    """Inclusive learning-rate grid, rounded to kill float drift."""
    n = int(round((high - low) / step))
    return [round(low + k * step, 10) for k in range(n + 1)]


def sweep_lr(model_config: ModelConfig, dataset: Sequence[Sample], config: TrainConfig, lrs) -> list:
    """Train once per learning rate; returns ``(lr, final epoch loss)`` pairs."""
    results = []
    for lr in lrs:
        res = train(model_config, dataset, replace(config, lr=float(lr)))
        results.append((float(lr), res.log[-1][1]))
    return results
