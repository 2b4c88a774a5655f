import struct
from fractions import Fraction

import numpy as np
import pytest

from nllinknet import tensor as T
from nllinknet.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from nllinknet.errors import CheckpointFormatError, CheckpointShapeError, CheckpointTruncatedError
from nllinknet.network import ModelConfig, build_model
from nllinknet.tensor import Tensor

W = Fraction(1, 8)


def model(variant="nl34", kind="embedded-gaussian", seed=0):
    m = build_model(ModelConfig(variant=variant, kind=kind, width=W, seed=seed))
    rng = np.random.default_rng(seed)
    for _, p in m.named_parameters():
        p.data[...] = rng.normal(size=p.shape).astype(np.float32)
    return m


@pytest.mark.parametrize("variant", ["baseline", "nl3", "nl4", "nl34"])
@pytest.mark.parametrize("kind", ["dot-product", "gaussian", "embedded-gaussian"])
def test_round_trip_byte_identical(tmp_path, variant, kind):
    m = model(variant, kind)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    loaded = load_checkpoint(path)
    assert loaded.config.variant == m.config.variant and loaded.config.kind == m.config.kind
    assert loaded.config.width == W
    assert encode_checkpoint(loaded) == path.read_bytes()


def test_round_trip_preserves_outputs_and_buffers(tmp_path):
    m = model()
    m.train()
    with T.no_grad():
        m(Tensor(np.random.default_rng(0).random((2, 3, 32, 32), dtype=np.float32)))
    save_checkpoint(m, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    for name, arr in m.state_dict().items():
        np.testing.assert_array_equal(arr, loaded.state_dict()[name])
    x = Tensor(np.random.default_rng(1).random((1, 3, 32, 32), dtype=np.float32))
    m.eval(), loaded.eval()
    with T.no_grad():
        np.testing.assert_array_equal(m(x).data, loaded(x).data)


def test_header_layout():
    buf = encode_checkpoint(model("nl4", "gaussian"))
    assert buf[:4] == MAGIC == b"NLLK"
    assert struct.unpack_from("<H", buf, 4) == (1,)
    assert struct.unpack_from("<BBII", buf, 6) == (2, 1, 1, 8)


def test_bad_magic():
    buf = bytearray(encode_checkpoint(model()))
    buf[:4] = b"XXXX"
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(bytes(buf))


def test_bad_version():
    buf = bytearray(encode_checkpoint(model()))
    buf[4:6] = struct.pack("<H", 9)
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(bytes(buf))


@pytest.mark.parametrize("cut", [3, 10, 20, 1000, -1])
def test_truncated(cut):
    buf = encode_checkpoint(model())
    with pytest.raises((CheckpointTruncatedError, CheckpointFormatError)):
        decode_checkpoint(buf[:cut])


def test_trailing_bytes():
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(encode_checkpoint(model()) + b"\0")


def test_nl34_into_baseline_is_shape_error(tmp_path):
    save_checkpoint(model("nl34"), tmp_path / "m.ckpt")
    with pytest.raises(CheckpointShapeError, match="nonlocal"):
        load_checkpoint(tmp_path / "m.ckpt", ModelConfig(variant="baseline", width=W))


def test_width_mismatch_is_shape_error(tmp_path):
    save_checkpoint(model("baseline"), tmp_path / "m.ckpt")
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(tmp_path / "m.ckpt", ModelConfig(variant="baseline", width=Fraction(1, 4)))


def test_save_is_deterministic(tmp_path):
    save_checkpoint(model(seed=4), tmp_path / "a.ckpt")
    save_checkpoint(model(seed=4), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert not list(tmp_path.glob("*.tmp"))
