"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic    4 bytes  b"NLLK"
    version  u16      1
    config   u8 variant code, u8 pairwise-kind code, u32 width numerator, u32 width denominator
    count    u32      number of tensors
    tensor   u16 name length, UTF-8 name, u8 rank, rank x u64 dims, float32 data

Tensors are parameters followed by BN running buffers, in model order.
"""

from __future__ import annotations

import os
import struct
from fractions import Fraction

import numpy as np

from .errors import CheckpointFormatError, CheckpointShapeError, CheckpointTruncatedError
from .network import ModelConfig, NLLinkNet, Variant, build_model
from .nonlocal_ops import PairwiseKind

MAGIC = b"NLLK"
VERSION = 1
_VARIANT_CODES = {Variant.BASELINE: 0, Variant.NL3: 1, Variant.NL4: 2, Variant.NL34: 3}
_KIND_CODES = {PairwiseKind.DOT_PRODUCT: 0, PairwiseKind.GAUSSIAN: 1, PairwiseKind.EMBEDDED_GAUSSIAN: 2}


def encode_checkpoint(model: NLLinkNet) -> bytes:
    cfg = model.config
    parts = [MAGIC, struct.pack("<H", VERSION),
             struct.pack("<BBII", _VARIANT_CODES[cfg.variant], _KIND_CODES[cfg.kind],
                         cfg.width.numerator, cfg.width.denominator)]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: NLLinkNet, path) -> None:
    data = encode_checkpoint(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> tuple:
    """Parse bytes into ``(ModelConfig, {name: float32 array})`` without building a model."""
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}, expected {VERSION}")
    vcode, kcode, num, den = r.unpack("<BBII")
    variants = {v: k for k, v in _VARIANT_CODES.items()}
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if vcode not in variants or kcode not in kinds or den == 0:
        raise CheckpointFormatError(f"invalid config block (variant {vcode}, kind {kcode}, width {num}/{den})")
    config = ModelConfig(variant=variants[vcode], kind=kinds[kcode], width=Fraction(num, den))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("tensor name is not valid UTF-8") from None
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return config, tensors


def load_checkpoint(path, config: ModelConfig | None = None) -> NLLinkNet:
    """Load a model; with ``config`` given, the tensors must fit that architecture instead."""
    with open(path, "rb") as fh:
        buf = fh.read()
    stored, tensors = decode_checkpoint(buf)
    model = build_model(config or stored)
    own = model.state_dict()
    extra = sorted(set(tensors) - set(own))
    missing = sorted(set(own) - set(tensors))
    if extra or missing:
        raise CheckpointShapeError(
            f"checkpoint tensors do not match the {model.config.variant.value} architecture: "
            f"unexpected {extra[:4]}{'...' if len(extra) > 4 else ''}, "
            f"missing {missing[:4]}{'...' if len(missing) > 4 else ''}"
        )
    for name, arr in tensors.items():
        if own[name].shape != arr.shape:
            raise CheckpointShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {own[name].shape}")
    model.load_state_dict(tensors)
    return model
