"""Verification drivers shared by the CLI and the test suite.

Gradient checks build small random float64 instances and reduce each op's
output to a scalar through a fixed random weighting, so every output element
contributes a distinct gradient.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .gradcheck import GradCheckReport, grad_check
from .network import ModelConfig, Variant, build_model
from .nonlocal_ops import NonLocalParams, PairwiseKind, nonlocal_block, nonlocal_op, nonlocal_oracle
from .tensor import Tensor
from .training import bce_loss


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, Tensor(weights)))


def op_case(target: str, kind="embedded-gaussian", seed: int = 0):
    """Return ``(scalar_fn, inputs)`` for one differentiable op."""
    rng = np.random.default_rng(seed)

    def t(*shape, scale=1.0):
        return Tensor(rng.normal(0.0, scale, size=shape))

    def weighted(op, inputs):
        probe = op()
        w = rng.normal(size=probe.shape)
        return (lambda: _weighted_sum(op(), w)), inputs

    if target == "conv2d":
        x, w, b = t(2, 3, 6, 5), t(4, 3, 3, 3), t(4)
        return weighted(lambda: T.conv2d(x, w, b, stride=2, padding=1), {"x": x, "weight": w, "bias": b})
    if target == "conv-transpose2d":
        x, w, b = t(2, 3, 4, 3), t(3, 2, 3, 3), t(2)
        return weighted(lambda: T.conv_transpose2d(x, w, b, stride=2, padding=1, output_padding=1),
                        {"x": x, "weight": w, "bias": b})
    if target == "maxpool2d":
        x = t(2, 3, 7, 7)
        return weighted(lambda: T.maxpool2d(x, 3, 2, padding=1), {"x": x})
    if target == "batchnorm2d":
        x, g, b = t(3, 4, 5, 5), t(4), t(4)
        state = T.BatchNormState.fresh(4, np.float64)
        return weighted(lambda: T.batchnorm2d(x, g, b, state, training=True), {"x": x, "gamma": g, "beta": b})
    if target == "softmax":
        x = t(2, 5, 7)
        return weighted(lambda: T.softmax(x, axis=-1), {"x": x})
    if target == "matmul":
        a, b = t(2, 3, 4), t(2, 4, 5)
        return weighted(lambda: T.matmul(a, b), {"a": a, "b": b})
    if target == "elementwise":
        a, b, c = t(2, 3, 4, 4), t(2, 3, 4, 4), t(1, 3, 1, 1)

        def op():
            s = T.add(T.mul(a, b), c)
            return T.add(T.sigmoid(s), T.scale(T.relu(T.sub(a, c)), 0.5))

        return weighted(op, {"a": a, "b": b, "c": c})
    if target == "nonlocal":
        kind = PairwiseKind.parse(kind)
        params = NonLocalParams.init(4, kind, rng, np.float64)
        params.w_z.data[...] = rng.normal(size=params.w_z.shape)
        params.b_z.data[...] = rng.normal(size=params.b_z.shape)
        x = t(2, 4, 3, 3)
        inputs = {"x": x, **{name: p for name, p in params.named_tensors()}}
        return weighted(lambda: nonlocal_block(x, kind, params), inputs)
    raise ConfigurationError(f"unknown gradcheck target {target!r}")


def model_case(kind="embedded-gaussian", seed: int = 0, variant=Variant.NL34, width=Fraction(1, 8),
               size: int = 64, batch: int = 2):
    """Full model + BCE loss in float64 with non-zero non-local output projections."""
    cfg = ModelConfig(variant=variant, kind=kind, width=width, seed=seed)
    model = build_model(cfg, dtype=np.float64)
    rng = np.random.default_rng([seed, 7])
    for name, p in model.named_parameters():
        if name.endswith(".w_z"):
            p.data[...] = rng.normal(0.0, 0.1, size=p.shape)
    model.train()
    x = Tensor(rng.random((batch, 3, size, size)))
    target = (rng.random((batch, 1, size, size)) < 0.2).astype(np.float64)
    inputs = dict(model.named_parameters())
    return (lambda: bce_loss(model(x), target)), inputs


def gradcheck_target(target: str, kind="embedded-gaussian", seed: int = 0, tolerance: float = 1e-4,
                     max_coords: int = 64) -> GradCheckReport:
    fn, inputs = model_case(kind, seed) if target == "model" else op_case(target, kind, seed)
    return grad_check(fn, inputs, tolerance=tolerance, max_coords=max_coords, seed=seed)


def random_nonlocal_instance(rng: np.random.Generator, kind) -> tuple:
    """Random (x, params) with c1 in {2, 4, 8} and N = H*W <= 64."""
    kind = PairwiseKind.parse(kind)
    c1 = int(rng.choice([2, 4, 8]))
    h = int(rng.integers(1, 9))
    w = int(rng.integers(1, 64 // h + 1))
    w = min(w, 8)
    params = NonLocalParams.init(c1, kind, rng, np.float64)
    for _, p in params.named_tensors():
        p.data[...] = rng.normal(0.0, 0.5, size=p.shape)
    x = Tensor(rng.normal(0.0, 1.0 / np.sqrt(c1), size=(int(rng.integers(1, 3)), c1, h, w)))
    return x, params


def max_relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """max |a - e| scaled by the largest |e| of the instance."""
    scale = max(float(np.abs(expected).max()), 1e-300)
    return float(np.abs(actual - expected).max()) / scale


def oracle_comparison(instances: int = 100, seed: int = 0) -> dict:
    """Worst relative error of :func:`nonlocal_op` against the loop oracle, per kind."""
    rng = np.random.default_rng(seed)
    worst = {}
    for kind in PairwiseKind:
        err = 0.0
        for _ in range(instances):
            x, params = random_nonlocal_instance(rng, kind)
            err = max(err, max_relative_error(nonlocal_op(x, kind, params).data,
                                              nonlocal_oracle(x, kind, params)))
        worst[kind.value] = err
    return worst
