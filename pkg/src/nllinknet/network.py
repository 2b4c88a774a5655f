"""NL-LinkNet: ResNet34 encoder, LinkNet decoder, optional non-local blocks.

Dataflow for a (B, 3, H, W) input at width multiplier 1::

    stem  7x7/2 conv 3->64, BN, ReLU, 3x3/2 maxpool          H/4
    e1    3 basic blocks, 64                                  H/4
    e2    4 basic blocks, 128, first stride 2   [+ NLB3]      H/8
    e3    6 basic blocks, 256, first stride 2   [+ NLB4]      H/16
    e4    3 basic blocks, 512, first stride 2                 H/32
    d4 = dec(512->256)(e4) + e3
    d3 = dec(256->128)(d4) + e2
    d2 = dec(128->64)(d3)  + e1
    d1 = dec(64->64)(d2)
    head  4x4/2 tconv 64->32, ReLU, 3x3 conv 32->32, ReLU, 3x3 conv 32->1, sigmoid

Non-local blocks sit in-line, so their output feeds both the next encoder
stage and the skip path.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeError
from .nonlocal_ops import NonLocalParams, PairwiseKind, nlb_param_count, nonlocal_block
from .tensor import BatchNormState, ConvSpec, Tensor

STAGE_CHANNELS = (64, 128, 256, 512)
STAGE_BLOCKS = (3, 4, 6, 3)
HEAD_CHANNELS = 32
SPATIAL_MULTIPLE = 32


class Variant(enum.Enum):
    BASELINE = "baseline"
    NL3 = "nl3"
    NL4 = "nl4"
    NL34 = "nl34"

    @property
    def nl_stages(self) -> tuple:
        """Encoder stages (1-based, stem excluded) followed by a non-local block."""
        return {"baseline": (), "nl3": (2,), "nl4": (3,), "nl34": (2, 3)}[self.value]

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        for v in cls:
            if v.value == key:
                return v
        raise ConfigurationError(f"unknown variant {value!r}; expected one of {[v.value for v in cls]}")


def parse_width(value) -> Fraction:
    try:
        w = Fraction(str(value)) if not isinstance(value, Fraction) else value
    except (ValueError, ZeroDivisionError):
        raise ConfigurationError(f"width multiplier {value!r} is not a number or fraction") from None
    if not 0 < w <= 1:
        raise ConfigurationError(f"width multiplier must lie in (0, 1], got {w}")
    return w


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.NL34
    kind: PairwiseKind = PairwiseKind.EMBEDDED_GAUSSIAN
    width: Fraction = Fraction(1)
    in_channels: int = 3
    out_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        object.__setattr__(self, "kind", PairwiseKind.parse(self.kind))
        object.__setattr__(self, "width", parse_width(self.width))
        for c in (*STAGE_CHANNELS, HEAD_CHANNELS, 16):
            # 16 = narrowest decoder bottleneck (64 / 4)
            self.channels(c)

    def channels(self, base: int) -> int:
        scaled = base * self.width
        if scaled.denominator != 1 or scaled < 2 or scaled % 2:
            raise ConfigurationError(
                f"width {self.width} turns {base} channels into {scaled}; "
                "every width must be an even integer >= 2"
            )
        return int(scaled)


# layers


class Module:
    """Minimal container: parameters, buffers and children found by attribute scan."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, child in enumerate(value):
                    if isinstance(child, Module):
                        yield from child.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, list):
                for i, child in enumerate(value):
                    if isinstance(child, Module):
                        yield from child.named_buffers(f"{full}.{i}.")
        yield from self._own_buffers(prefix)

    def _own_buffers(self, prefix: str) -> Iterator[tuple]:
        return iter(())

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for child in value:
                    if isinstance(child, Module):
                        yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, x):
        return self.forward(x)


def _kaiming(rng, shape, fan_in, dtype):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng, dtype=np.float32):
        self._spec = spec
        kh, kw = spec.kernel_size
        fan_in = spec.in_channels * kh * kw
        self.weight = Tensor(_kaiming(rng, (spec.out_channels, spec.in_channels, kh, kw), fan_in, dtype),
                             requires_grad=True)
        if spec.bias:
            self.bias = Tensor(np.zeros(spec.out_channels, dtype), requires_grad=True)

    def forward(self, x):
        s = self._spec
        return T.conv2d(x, self.weight, getattr(self, "bias", None), s.stride, s.padding, s.dilation)


class ConvTranspose2d(Module):
    def __init__(self, spec: ConvSpec, rng, dtype=np.float32):
        self._spec = spec
        kh, kw = spec.kernel_size
        # each output pixel gathers about in*kh*kw/stride^2 taps
        fan_in = max(1, spec.in_channels * kh * kw // (spec.stride ** 2))
        self.weight = Tensor(_kaiming(rng, (spec.in_channels, spec.out_channels, kh, kw), fan_in, dtype),
                             requires_grad=True)
        if spec.bias:
            self.bias = Tensor(np.zeros(spec.out_channels, dtype), requires_grad=True)

    def forward(self, x):
        s = self._spec
        return T.conv_transpose2d(x, self.weight, getattr(self, "bias", None), s.stride, s.padding,
                                  s.output_padding, s.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.weight = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self._state = BatchNormState.fresh(channels, dtype)

    def _own_buffers(self, prefix):
        yield f"{prefix}running_mean", self._state.running_mean
        yield f"{prefix}running_var", self._state.running_var

    def forward(self, x):
        return T.batchnorm2d(x, self.weight, self.bias, self._state, self.training)


class BasicBlock(Module):
    """ResNet basic block: two 3x3 convs with BN, identity or 1x1 projection shortcut."""

    def __init__(self, cin: int, cout: int, stride: int, rng, dtype):
        self.conv1 = Conv2d(ConvSpec(cin, cout, 3, stride=stride, padding=1, bias=False), rng, dtype)
        self.bn1 = BatchNorm2d(cout, dtype)
        self.conv2 = Conv2d(ConvSpec(cout, cout, 3, padding=1, bias=False), rng, dtype)
        self.bn2 = BatchNorm2d(cout, dtype)
        if stride != 1 or cin != cout:
            self.downsample_conv = Conv2d(ConvSpec(cin, cout, 1, stride=stride, bias=False), rng, dtype)
            self.downsample_bn = BatchNorm2d(cout, dtype)

    def forward(self, x):
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        shortcut = x
        if hasattr(self, "downsample_conv"):
            shortcut = self.downsample_bn(self.downsample_conv(x))
        return T.relu(T.add(out, shortcut))


class DecoderBlock(Module):
    """1x1 reduce to c/4, 3x3 stride-2 transpose conv, 1x1 expand; BN+ReLU after each."""

    def __init__(self, cin: int, cout: int, rng, dtype):
        mid = cin // 4
        self.conv1 = Conv2d(ConvSpec(cin, mid, 1), rng, dtype)
        self.norm1 = BatchNorm2d(mid, dtype)
        self.deconv2 = ConvTranspose2d(ConvSpec(mid, mid, 3, stride=2, padding=1, output_padding=1), rng, dtype)
        self.norm2 = BatchNorm2d(mid, dtype)
        self.conv3 = Conv2d(ConvSpec(mid, cout, 1), rng, dtype)
        self.norm3 = BatchNorm2d(cout, dtype)

    def forward(self, x):
        x = T.relu(self.norm1(self.conv1(x)))
        x = T.relu(self.norm2(self.deconv2(x)))
        return T.relu(self.norm3(self.conv3(x)))


class NonLocalBlock(Module):
    def __init__(self, channels: int, kind: PairwiseKind, rng, dtype):
        self._kind = kind
        self._params = NonLocalParams.init(channels, kind, rng, dtype)
        for name, t in self._params.named_tensors():
            setattr(self, name, t)

    @property
    def params(self) -> NonLocalParams:
        p = self._params
        for name, _ in p.named_tensors():
            setattr(p, name, getattr(self, name))
        return p

    def forward(self, x):
        return nonlocal_block(x, self._kind, self.params)


class NLLinkNet(Module):
    def __init__(self, config: ModelConfig, dtype=np.float32):
        self._config = config
        self._dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        ch = [config.channels(c) for c in STAGE_CHANNELS]
        head = config.channels(HEAD_CHANNELS)

        self.firstconv = Conv2d(ConvSpec(config.in_channels, ch[0], 7, stride=2, padding=3, bias=False), rng, dtype)
        self.firstbn = BatchNorm2d(ch[0], dtype)
        cin = ch[0]
        for stage, (cout, blocks) in enumerate(zip(ch, STAGE_BLOCKS), start=1):
            layer = []
            for b in range(blocks):
                stride = 2 if (b == 0 and stage > 1) else 1
                layer.append(BasicBlock(cin, cout, stride, rng, dtype))
                cin = cout
            setattr(self, f"encoder{stage}", layer)

        # non-local weights are drawn from their own stream so that every
        # variant shares identical encoder/decoder initial weights
        nl_rng = np.random.default_rng([config.seed, 1])
        self._nl = {}
        for stage in config.variant.nl_stages:
            block = NonLocalBlock(ch[stage - 1], config.kind, nl_rng, dtype)
            setattr(self, f"nonlocal{stage + 1}", block)
            self._nl[stage] = block

        self.decoder4 = DecoderBlock(ch[3], ch[2], rng, dtype)
        self.decoder3 = DecoderBlock(ch[2], ch[1], rng, dtype)
        self.decoder2 = DecoderBlock(ch[1], ch[0], rng, dtype)
        self.decoder1 = DecoderBlock(ch[0], ch[0], rng, dtype)

        self.finaldeconv1 = ConvTranspose2d(ConvSpec(ch[0], head, 4, stride=2, padding=1), rng, dtype)
        self.finalconv2 = Conv2d(ConvSpec(head, head, 3, padding=1), rng, dtype)
        self.finalconv3 = Conv2d(ConvSpec(head, config.out_channels, 3, padding=1), rng, dtype)

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def dtype(self):
        return self._dtype

    def _stage(self, i: int, x):
        for block in getattr(self, f"encoder{i}"):
            x = block(x)
        if i in self._nl:
            x = self._nl[i](x)
        return x

    def logits(self, x: Tensor) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self._dtype))
        if x.ndim != 4 or x.shape[1] != self._config.in_channels:
            raise ShapeError(f"expected input (batch, {self._config.in_channels}, H, W), got {x.shape}")
        for axis, extent in (("height", x.shape[2]), ("width", x.shape[3])):
            if extent % SPATIAL_MULTIPLE or extent == 0:
                raise ShapeError(f"input {axis} {extent} is not a positive multiple of {SPATIAL_MULTIPLE}")
        x = T.relu(self.firstbn(self.firstconv(x)))
        x = T.maxpool2d(x, 3, 2, padding=1)
        e1 = self._stage(1, x)
        e2 = self._stage(2, e1)
        e3 = self._stage(3, e2)
        e4 = self._stage(4, e3)

        d4 = T.add(self.decoder4(e4), e3)
        d3 = T.add(self.decoder3(d4), e2)
        d2 = T.add(self.decoder2(d3), e1)
        d1 = self.decoder1(d2)

        out = T.relu(self.finaldeconv1(d1))
        out = T.relu(self.finalconv2(out))
        return self.finalconv3(out)

    def forward(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.logits(x))

    # state handling

    def state_dict(self) -> dict:
        """Parameters and BN running buffers by dotted name (live arrays, not copies)."""
        state = {name: t.data for name, t in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = self.state_dict()
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise ShapeError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            if own[name].shape != np.shape(arr):
                raise ShapeError(f"{name}: stored shape {np.shape(arr)} != model shape {own[name].shape}")
            own[name][...] = arr

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def astype(self, dtype) -> "NLLinkNet":
        """Copy of the model with all parameters and buffers cast to ``dtype``."""
        other = NLLinkNet(self._config, dtype)
        other.load_state_dict({k: np.asarray(v, dtype=dtype) for k, v in self.state_dict().items()})
        other.train(self.training)
        return other


def build_model(config: ModelConfig, dtype=np.float32) -> NLLinkNet:
    return NLLinkNet(config, dtype)


def forward(model: NLLinkNet, batch) -> Tensor:
    """Per-pixel road probabilities in (0, 1), shape (B, 1, H, W)."""
    return model(batch)


def param_count(model: Module) -> int:
    """Learnable parameters only: weights, biases, BN gamma/beta."""
    return sum(p.size for _, p in model.named_parameters())


def expected_nl_delta(config: ModelConfig) -> int:
    """Parameters the configured non-local blocks add over the baseline."""
    return sum(nlb_param_count(config.channels(STAGE_CHANNELS[s - 1]), config.kind)
               for s in config.variant.nl_stages)
