"""Road IoU metrics and flip/multi-scale test-time augmentation with voting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Sample, save_mask
from .errors import ConfigurationError, DataError, ShapeError
from .network import SPATIAL_MULTIPLE, NLLinkNet
from .transforms import DIHEDRAL, Dihedral, resize_bilinear


@dataclass(frozen=True)
class TtaConfig:
    multi_scale: bool = False
    scales: tuple = (0.75, 1.0, 1.25)
    binarize: float = 0.5
    size_multiple: int = SPATIAL_MULTIPLE

    @property
    def active_scales(self) -> tuple:
        return tuple(self.scales) if self.multi_scale else (1.0,)

    @property
    def variant_count(self) -> int:
        return len(DIHEDRAL) * len(self.active_scales)

    @property
    def vote_threshold(self) -> int:
        return self.variant_count // 2

    def echo(self) -> dict:
        return {"multi_scale": self.multi_scale, "scales": list(self.active_scales),
                "variants": self.variant_count, "vote_threshold": self.vote_threshold,
                "binarize": self.binarize}


def _binary(a, what: str) -> np.ndarray:
    a = np.asarray(a)
    if not np.all((a == 0) | (a == 1)):
        raise DataError(f"{what} mask is not binary")
    return a.astype(bool)


def confusion(pred, gt) -> tuple:
    p, g = _binary(pred, "prediction"), _binary(gt, "ground-truth")
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn


def _iou(tp: int, fp: int, fn: int) -> float:
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def road_iou(pred, gt) -> float:
    """|pred & gt| / |pred | gt| over road pixels; 1.0 when both are empty."""
    return _iou(*confusion(pred, gt))


def occluded_confusion(pred, gt, occlusion) -> tuple:
    """Confusion counts restricted to pixels marked in ``occlusion``."""
    region = _binary(occlusion, "occlusion")
    p, g = _binary(pred, "prediction") & region, _binary(gt, "ground-truth") & region
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p & ~g)), int(np.count_nonzero(~p & g))


@dataclass
class EvalReport:
    per_image: list  # dicts: id, iou, tp, fp, fn
    miou: float
    global_iou: float
    tp: int
    fp: int
    fn: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"{'id':<24} {'iou':>8} {'tp':>8} {'fp':>8} {'fn':>8}"]
        for r in self.per_image:
            lines.append(f"{r['id']:<24} {r['iou']:8.4f} {r['tp']:8d} {r['fp']:8d} {r['fn']:8d}")
        lines.append(f"mIOU (per-image mean): {self.miou:.6f}")
        lines.append(f"global IoU (pooled):   {self.global_iou:.6f}")
        if self.config:
            lines.append("config: " + json.dumps(self.config, sort_keys=True))
        return "\n".join(lines) + "\n"


def miou(pairs: Sequence, ids: Sequence[str] | None = None, config: dict | None = None) -> EvalReport:
    """Mean of per-image road IoU; the pooled global IoU is reported alongside."""
    if not pairs:
        raise DataError("miou needs at least one (prediction, ground truth) pair")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pairs))]
    rows, TP, FP, FN = [], 0, 0, 0
    for sid, (pred, gt) in zip(ids, pairs):
        tp, fp, fn = confusion(pred, gt)
        rows.append({"id": sid, "iou": _iou(tp, fp, fn), "tp": tp, "fp": fp, "fn": fn})
        TP, FP, FN = TP + tp, FP + fp, FN + fn
    mean = float(np.mean([r["iou"] for r in rows]))
    return EvalReport(rows, mean, _iou(TP, FP, FN), TP, FP, FN, dict(config or {}))


# test-time augmentation


def tta_variants(image: np.ndarray) -> list:
    """The 8 dihedral copies of a square (…, H, W) image, each with its transform.

    ``transform.invert`` undoes ``transform.apply`` exactly.
    """
    h, w = image.shape[-2:]
    if h != w:
        raise ShapeError(f"dihedral test-time augmentation needs a square image, got {h}x{w}")
    return [(np.ascontiguousarray(d.apply(image)), d) for d in DIHEDRAL]


Predictor = Callable[[np.ndarray], np.ndarray]


def as_predictor(model) -> Predictor:
    """Wrap a model as ``(B,3,H,W) array -> (B,1,H,W) probabilities`` in eval mode."""
    if not isinstance(model, NLLinkNet):
        return model

    def predict(batch: np.ndarray) -> np.ndarray:
        model.eval()
        with T.no_grad():
            return model(T.Tensor(np.asarray(batch, dtype=model.dtype))).data

    return predict


def _scaled_side(side: int, scale: float) -> int:
    return int(round(side * scale))


def check_tta_size(side: int, config: TtaConfig) -> None:
    bad = [s for s in config.active_scales
           if _scaled_side(side, s) < config.size_multiple or _scaled_side(side, s) % config.size_multiple]
    if bad:
        step = config.size_multiple
        valid = [n for n in range(step, 8 * step * 8 + 1, step)
                 if all(_scaled_side(n, s) % step == 0 and _scaled_side(n, s) >= step for s in config.active_scales)]
        raise ConfigurationError(
            f"image side {side} scaled by {bad} is not a multiple of {step}; "
            f"valid sides include {valid[:8]}"
        )


def tta_votes(predictor, image: np.ndarray, config: TtaConfig = TtaConfig()) -> np.ndarray:
    """Number of variants voting road at each pixel, shape (H, W)."""
    predictor = as_predictor(predictor)
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"tta expects a (C, H, W) image, got {image.shape}")
    side = image.shape[-1]
    if image.shape[-2] != side:
        raise ShapeError(f"dihedral test-time augmentation needs a square image, got {image.shape[1:]}")
    check_tta_size(side, config)
    votes = np.zeros((side, side), dtype=np.int32)
    for scale in config.active_scales:
        n = _scaled_side(side, scale)
        scaled = resize_bilinear(image, n, n) if n != side else image
        variants = tta_variants(scaled)
        probs = np.asarray(predictor(np.stack([v for v, _ in variants])))
        if probs.shape != (len(variants), 1, n, n):
            raise ShapeError(f"predictor returned {probs.shape}, expected {(len(variants), 1, n, n)}")
        for p, (_, d) in zip(probs, variants):
            back = d.invert(p[0])
            if n != side:
                back = resize_bilinear(np.ascontiguousarray(back), side, side)
            votes += back >= config.binarize
    return votes


def tta_predict(predictor, image: np.ndarray, config: TtaConfig = TtaConfig()) -> np.ndarray:
    """Binary (H, W) uint8 mask: road where at least ``vote_threshold`` variants agree."""
    return (tta_votes(predictor, image, config) >= config.vote_threshold).astype(np.uint8)


def evaluate(model, dataset: Sequence[Sample], config: TtaConfig = TtaConfig(), out_dir=None) -> EvalReport:
    """TTA-predict every sample, score it, and optionally write masks and reports.

    Writes ``report.json``, ``report.txt`` and ``masks/<id>.png`` under ``out_dir``.
    """
    if not dataset:
        raise DataError("evaluation dataset is empty")
    predictor = as_predictor(model)
    preds = [tta_predict(predictor, s.image, config) for s in dataset]
    report = miou([(p, s.mask[0]) for p, s in zip(preds, dataset)], [s.id for s in dataset], config.echo())
    if out_dir is not None:
        out = Path(out_dir)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        for p, s in zip(preds, dataset):
            save_mask(out / "masks" / f"{s.id}.png", p)
        (out / "report.json").write_text(report.to_json())
        (out / "report.txt").write_text(report.to_text())
    return report
