"""Non-local operation and residual non-local block.

For a feature map flattened to N = H*W positions, each output position is a
normalized weighted sum over all positions:

    y_i = (1 / C(x_i)) * sum_j f(x_i, x_j) * g(x_j),    g(x) = W_g x + b_g

with pairwise function ``f`` and normalizer ``C`` chosen by :class:`PairwiseKind`:

* dot product:        f = u(x_i) . v(x_j),      C = N
* embedded Gaussian:  f = exp(u(x_i) . v(x_j)), C = sum_j f
* Gaussian:           f = exp(x_i . x_j),       C = sum_j f

The block adds a projected residual, ``z = W_z y + b_z + x``. All projections
are 1x1 convolutions with bias, internal width c2 = c1 / 2.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeError
from .tensor import Tensor


class PairwiseKind(enum.Enum):
    DOT_PRODUCT = "dot-product"
    GAUSSIAN = "gaussian"
    EMBEDDED_GAUSSIAN = "embedded-gaussian"

    @property
    def has_embeddings(self) -> bool:
        return self is not PairwiseKind.GAUSSIAN

    @property
    def softmax_normalized(self) -> bool:
        return self is not PairwiseKind.DOT_PRODUCT

    @classmethod
    def parse(cls, value) -> "PairwiseKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == key:
                return kind
        raise ConfigurationError(
            f"unknown pairwise kind {value!r}; expected one of {[k.value for k in cls]}"
        )


def _check_channels(c1: int) -> int:
    if c1 < 2 or c1 % 2:
        raise ConfigurationError(f"non-local block needs an even channel count >= 2, got {c1}")
    return c1 // 2


@dataclass
class NonLocalParams:
    """Weights of one block; each weight is a (c_out, c_in, 1, 1) conv kernel."""

    c1: int
    kind: PairwiseKind
    w_g: Tensor
    b_g: Tensor
    w_z: Tensor
    b_z: Tensor
    w_u: Optional[Tensor] = None
    b_u: Optional[Tensor] = None
    w_v: Optional[Tensor] = None
    b_v: Optional[Tensor] = None

    @property
    def c2(self) -> int:
        return self.c1 // 2

    @classmethod
    def init(cls, c1: int, kind, rng: np.random.Generator, dtype=np.float32) -> "NonLocalParams":
        """Fan-in scaled normal embeddings; W_z and b_z start at exactly zero."""
        kind = PairwiseKind.parse(kind)
        c2 = _check_channels(c1)

        def proj(cout, cin):
            w = rng.normal(0.0, np.sqrt(1.0 / cin), size=(cout, cin, 1, 1)).astype(dtype)
            return Tensor(w, requires_grad=True), Tensor(np.zeros(cout, dtype), requires_grad=True)

        w_g, b_g = proj(c2, c1)
        extra = {}
        if kind.has_embeddings:
            extra["w_u"], extra["b_u"] = proj(c2, c1)
            extra["w_v"], extra["b_v"] = proj(c2, c1)
        w_z = Tensor(np.zeros((c1, c2, 1, 1), dtype), requires_grad=True)
        b_z = Tensor(np.zeros(c1, dtype), requires_grad=True)
        return cls(c1=c1, kind=kind, w_g=w_g, b_g=b_g, w_z=w_z, b_z=b_z, **extra)

    def named_tensors(self) -> list:
        names = ["w_u", "b_u", "w_v", "b_v", "w_g", "b_g", "w_z", "b_z"]
        return [(n, getattr(self, n)) for n in names if getattr(self, n) is not None]

    def validate(self, kind: PairwiseKind) -> None:
        c2 = _check_channels(self.c1)
        if kind is not self.kind:
            raise ConfigurationError(f"params were built for {self.kind.value}, not {kind.value}")
        present = self.w_u is not None or self.w_v is not None
        if kind.has_embeddings and (self.w_u is None or self.w_v is None):
            raise ConfigurationError(f"{kind.value} needs both u and v embeddings")
        if not kind.has_embeddings and present:
            raise ConfigurationError("gaussian pairwise function takes no u/v embeddings")
        expected = {"w_g": (c2, self.c1, 1, 1), "b_g": (c2,), "w_z": (self.c1, c2, 1, 1), "b_z": (self.c1,)}
        if kind.has_embeddings:
            expected.update(w_u=(c2, self.c1, 1, 1), b_u=(c2,), w_v=(c2, self.c1, 1, 1), b_v=(c2,))
        for name, t in self.named_tensors():
            if t.shape != expected[name]:
                raise ShapeError(f"non-local {name} has shape {t.shape}, expected {expected[name]}")


def _check_input(x: Tensor, kind: PairwiseKind, params: NonLocalParams) -> None:
    params.validate(kind)
    if x.ndim != 4:
        raise ShapeError(f"non-local input must be (batch, channel, height, width), got {x.shape}")
    if x.shape[1] != params.c1:
        raise ShapeError(f"non-local input has {x.shape[1]} channels, params expect {params.c1}")
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError("non-local input has no spatial positions")


def flatten_positions(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, N, C) with N = H*W in row-major order."""
    b, c, h, w = x.shape
    return T.transpose(T.reshape(x, (b, c, h * w)), (0, 2, 1))


def unflatten_positions(y: Tensor, h: int, w: int) -> Tensor:
    """Inverse of :func:`flatten_positions`."""
    b, n, c = y.shape
    if n != h * w:
        raise ShapeError(f"cannot unflatten {n} positions to {h}x{w}")
    return T.reshape(T.transpose(y, (0, 2, 1)), (b, c, h, w))


def pair_scores(x: Tensor, kind, params: NonLocalParams) -> Tensor:
    """Raw scores s_ij (B, N, N) before normalization; f = s or exp(s)."""
    kind = PairwiseKind.parse(kind)
    if kind.has_embeddings:
        theta = flatten_positions(T.conv2d(x, params.w_u, params.b_u))
        phi = T.reshape(T.conv2d(x, params.w_v, params.b_v), (x.shape[0], params.c2, -1))
        return T.matmul(theta, phi)
    xf = flatten_positions(x)
    return T.matmul(xf, T.reshape(x, (x.shape[0], x.shape[1], -1)))


def attention_weights(x: Tensor, kind, params: NonLocalParams) -> Tensor:
    """Effective weights f(x_i, x_j) / C(x_i), shape (B, N, N)."""
    kind = PairwiseKind.parse(kind)
    _check_input(x, kind, params)
    scores = pair_scores(x, kind, params)
    if kind.softmax_normalized:
        # exp then divide by the row sum, i.e. a row softmax
        return T.softmax(scores, axis=-1)
    n = scores.shape[-1]
    return T.scale(scores, 1.0 / n)


def nonlocal_op(x: Tensor, kind, params: NonLocalParams) -> Tensor:
    """y = (1/C) sum_j f(x_i, x_j) g(x_j); returns (B, c2, H, W)."""
    kind = PairwiseKind.parse(kind)
    weights = attention_weights(x, kind, params)
    g = flatten_positions(T.conv2d(x, params.w_g, params.b_g))
    y = T.matmul(weights, g)
    return unflatten_positions(y, x.shape[2], x.shape[3])


def nonlocal_block(x: Tensor, kind, params: NonLocalParams) -> Tensor:
    """Residual block z = W_z y + b_z + x; shape-preserving."""
    y = nonlocal_op(x, kind, params)
    return T.add(T.conv2d(y, params.w_z, params.b_z), x)


def nonlocal_oracle(x, kind, params: NonLocalParams) -> np.ndarray:
    """Reference for :func:`nonlocal_op` written as the literal double loop.

    Every f(x_i, x_j) is evaluated explicitly and the normalizer is summed by
    hand. Slow; exists only to check the vectorized path.
    """
    kind = PairwiseKind.parse(kind)
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    _check_input(xt, kind, params)
    xd = np.asarray(xt.data, dtype=np.float64)
    b, c1, h, w = xd.shape
    c2, n = params.c2, h * w

    def mat(t):
        return np.asarray(t.data, dtype=np.float64).reshape(t.shape[0], -1)

    wg, bg = mat(params.w_g), np.asarray(params.b_g.data, dtype=np.float64)
    if kind.has_embeddings:
        wu, bu = mat(params.w_u), np.asarray(params.b_u.data, dtype=np.float64)
        wv, bv = mat(params.w_v), np.asarray(params.b_v.data, dtype=np.float64)

    out = np.zeros((b, c2, h, w))
    for bi in range(b):
        feats = [xd[bi, :, p // w, p % w] for p in range(n)]
        for i in range(n):
            xi = feats[i]
            acc = np.zeros(c2)
            norm = 0.0
            for j in range(n):
                xj = feats[j]
                if kind is PairwiseKind.GAUSSIAN:
                    f = np.exp(float(np.dot(xi, xj)))
                else:
                    s = float(np.dot(wu @ xi + bu, wv @ xj + bv))
                    f = s if kind is PairwiseKind.DOT_PRODUCT else np.exp(s)
                acc += f * (wg @ xj + bg)
                norm += f
            if kind is PairwiseKind.DOT_PRODUCT:
                norm = float(n)
            out[bi, :, i // w, i % w] = acc / norm
    return out


def nlb_param_count(c1: int, kind) -> int:
    """Learnable parameters of one block with input width ``c1`` (biases included)."""
    kind = PairwiseKind.parse(kind)
    c2 = _check_channels(c1)
    projections = 4 if kind.has_embeddings else 2
    # each projection: c1*c2 weights; biases are c2 for u, v, g and c1 for z
    return projections * c1 * c2 + (projections - 1) * c2 + c1
