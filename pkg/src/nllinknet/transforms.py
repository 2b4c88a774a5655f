"""Geometric helpers on (..., H, W) arrays: dihedral group, resizing, shifts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class Dihedral:
    """Element of the square's symmetry group: ``k`` quarter turns after an optional transpose."""

    k: int
    transpose: bool

    @property
    def name(self) -> str:
        return _NAMES[(self.k, self.transpose)]

    def apply(self, a: np.ndarray) -> np.ndarray:
        if self.transpose:
            a = np.swapaxes(a, -1, -2)
        return np.rot90(a, self.k, axes=(-2, -1))

    def invert(self, a: np.ndarray) -> np.ndarray:
        a = np.rot90(a, -self.k, axes=(-2, -1))
        if self.transpose:
            a = np.swapaxes(a, -1, -2)
        return a


_NAMES = {
    (0, False): "identity",
    (1, False): "rot90",
    (2, False): "rot180",  # horizontal + vertical flip
    (3, False): "rot270",
    (0, True): "diagonal",  # transpose
    (1, True): "vflip",
    (2, True): "anti-diagonal",
    (3, True): "hflip",
}

DIHEDRAL = tuple(Dihedral(k, t) for t in (False, True) for k in range(4))


def hflip(a: np.ndarray) -> np.ndarray:
    return a[..., ::-1].copy()


def vflip(a: np.ndarray) -> np.ndarray:
    return a[..., ::-1, :].copy()


def shift(a: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate content by ``dx`` columns and ``dy`` rows, zero fill."""
    h, w = a.shape[-2:]
    out = np.zeros_like(a)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_r = slice(max(0, -dy), h - max(0, dy))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_r, dst_c] = a[..., src_r, src_c]
    return out


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    # pixel-centre alignment
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize_bilinear(a: np.ndarray, h: int, w: int) -> np.ndarray:
    if h < 1 or w < 1:
        raise ShapeError(f"cannot resize to {h}x{w}")
    H, W = a.shape[-2:]
    if (H, W) == (h, w):
        return a.copy()
    out = a
    for axis, n_in, n_out in ((-2, H, h), (-1, W, w)):
        src = np.clip(_source_coords(n_out, n_in), 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        f = (src - i0).astype(a.dtype)
        lo, hi = np.take(out, i0, axis=axis), np.take(out, i1, axis=axis)
        shape = [1] * out.ndim
        shape[axis] = n_out
        f = f.reshape(shape)
        out = lo * (1 - f) + hi * f
    return out.astype(a.dtype, copy=False)


def resize_nearest(a: np.ndarray, h: int, w: int) -> np.ndarray:
    if h < 1 or w < 1:
        raise ShapeError(f"cannot resize to {h}x{w}")
    H, W = a.shape[-2:]
    rows = np.minimum(np.floor((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    cols = np.minimum(np.floor((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return a[..., rows[:, None], cols[None, :]]


def center_fit(a: np.ndarray, h: int, w: int) -> np.ndarray:
    """Center-crop or zero-pad the last two axes to ``h`` x ``w``."""
    H, W = a.shape[-2:]
    out = np.zeros(a.shape[:-2] + (h, w), dtype=a.dtype)
    ch, cw = min(H, h), min(W, w)
    sr, sc = (H - ch) // 2, (W - cw) // 2
    dr, dc = (h - ch) // 2, (w - cw) // 2
    out[..., dr:dr + ch, dc:dc + cw] = a[..., sr:sr + ch, sc:sc + cw]
    return out
