"""Samples, on-disk datasets, cropping and the synthetic occluded-road generator.

On-disk layout::

    <root>/index.txt             one sample id per line
    <root>/images/<id>.png       8-bit RGB
    <root>/masks/<id>.png        8-bit gray, road=255, background=0
    <root>/occlusion/<id>.png    optional, same convention
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    ConfigurationError,
    DataError,
    DimensionMismatchError,
    NonGrayscaleMaskError,
    ShapeError,
    UnreadableImageError,
)


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (1, H, W) float32 in {0, 1}
    id: str = ""
    occlusion: Optional[np.ndarray] = None  # (1, H, W) float32 in {0, 1}

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ShapeError(f"sample {self.id!r}: image must be (C,H,W) and mask (1,H,W)")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ShapeError(f"sample {self.id!r}: image {self.image.shape} and mask {self.mask.shape} differ")
        if self.occlusion is not None and self.occlusion.shape != self.mask.shape:
            raise ShapeError(f"sample {self.id!r}: occlusion shape {self.occlusion.shape} != mask shape")

    @property
    def size(self) -> tuple:
        return self.mask.shape[1:]


def stack_samples(samples: Sequence[Sample]) -> tuple:
    """(images (B,3,H,W), masks (B,1,H,W)) float32 arrays."""
    images = np.stack([s.image for s in samples]).astype(np.float32, copy=False)
    masks = np.stack([s.mask for s in samples]).astype(np.float32, copy=False)
    return images, masks


# I/O


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except (OSError, UnidentifiedImageError) as exc:
        raise UnreadableImageError(f"cannot read image {path}: {exc}") from None


def _gray(img: Image.Image, path) -> np.ndarray:
    if img.mode in ("L", "1"):
        return np.asarray(img.convert("L"))
    if img.mode == "P":
        img = img.convert("RGB")
    if img.mode in ("RGB", "RGBA"):
        arr = np.asarray(img)[..., :3]
        if np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 1], arr[..., 2]):
            return arr[..., 0]
    raise NonGrayscaleMaskError(f"mask {path} is not grayscale (mode {img.mode})")


def load_mask(path) -> np.ndarray:
    """Gray 8-bit mask binarized at 128, as (1, H, W) float32."""
    return (_gray(_open(path), path) >= 128).astype(np.float32)[None]


def load_sample(image_path, mask_path, occlusion_path=None, sample_id: str | None = None) -> Sample:
    img = _open(image_path)
    rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    mask = load_mask(mask_path)
    if rgb.shape[:2] != mask.shape[1:]:
        raise DimensionMismatchError(
            f"image {image_path} is {rgb.shape[1]}x{rgb.shape[0]} but mask {mask_path} is "
            f"{mask.shape[2]}x{mask.shape[1]}"
        )
    occ = None
    if occlusion_path is not None:
        occ = load_mask(occlusion_path)
        if occ.shape != mask.shape:
            raise DimensionMismatchError(f"occlusion {occlusion_path} size differs from mask {mask_path}")
    sid = sample_id if sample_id is not None else Path(image_path).stem
    return Sample(np.ascontiguousarray(rgb.transpose(2, 0, 1)), mask, sid, occ)


def to_uint8_mask(mask: np.ndarray) -> np.ndarray:
    """Binary (…, H, W) mask to 2-D uint8 with road=255."""
    m = np.asarray(mask).reshape(np.shape(mask)[-2:])
    return np.where(m > 0.5, 255, 0).astype(np.uint8)


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(to_uint8_mask(mask), mode="L").save(path)


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def write_dataset(root, samples: Sequence[Sample]) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    has_occ = any(s.occlusion is not None for s in samples)
    if has_occ:
        (root / "occlusion").mkdir(exist_ok=True)
    for s in samples:
        if not s.id or "/" in s.id or "\n" in s.id:
            raise DataError(f"invalid sample id {s.id!r}")
        save_image(root / "images" / f"{s.id}.png", s.image)
        save_mask(root / "masks" / f"{s.id}.png", s.mask)
        if has_occ:
            occ = s.occlusion if s.occlusion is not None else np.zeros_like(s.mask)
            save_mask(root / "occlusion" / f"{s.id}.png", occ)
    (root / "index.txt").write_text("".join(f"{s.id}\n" for s in samples))


def read_dataset(root) -> list:
    root = Path(root)
    index = root / "index.txt"
    if not index.is_file():
        raise DataError(f"dataset index {index} not found")
    ids = [line.strip() for line in index.read_text().splitlines() if line.strip()]
    if not ids:
        raise DataError(f"dataset {root} is empty")
    occ_dir = root / "occlusion"
    samples = []
    for sid in ids:
        occ = occ_dir / f"{sid}.png"
        samples.append(load_sample(root / "images" / f"{sid}.png", root / "masks" / f"{sid}.png",
                                   occ if occ.is_file() else None, sid))
    return samples


def crop(sample: Sample, x: int, y: int, size: int) -> Sample:
    """Square window with top-left corner at column ``x``, row ``y``."""
    h, w = sample.size
    if size < 1 or x < 0 or y < 0 or x + size > w or y + size > h:
        raise ShapeError(f"crop window ({x}, {y}, size {size}) exceeds {w}x{h} sample")
    sl = (slice(None), slice(y, y + size), slice(x, x + size))
    occ = None if sample.occlusion is None else sample.occlusion[sl].copy()
    return Sample(sample.image[sl].copy(), sample.mask[sl].copy(), sample.id, occ)


# synthetic generator


@dataclass(frozen=True)
class SynthConfig:
    size: int = 64
    road_count: tuple = (1, 3)
    road_width: tuple = (2.0, 4.0)
    occluder_count: tuple = (1, 3)
    occluder_radius: tuple = (3.0, 6.0)
    noise: float = 0.08
    road_fraction: tuple = (0.02, 0.25)
    seed: int = 0

    def __post_init__(self):
        if self.size < 32 or self.size % 32:
            raise ConfigurationError(f"canvas size must be a positive multiple of 32, got {self.size}")
        for name in ("road_count", "road_width", "occluder_count", "occluder_radius", "road_fraction"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigurationError(f"{name} range {lo}..{hi} is invalid")
        if self.road_width[0] < 1:
            raise ConfigurationError("road width must be >= 1 px")
        if self.road_count[1] == 0 and self.occluder_count[1] > 0:
            raise ConfigurationError("occluders need at least one road to cover")
        if self.occluder_radius[1] > 0 and self.occluder_radius[0] < 1:
            raise ConfigurationError("occluder radius must be >= 1 px")


def _segment_distance(px, py, a, b) -> np.ndarray:
    d = b - a
    denom = float(d @ d)
    if denom == 0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def _random_walk(rng, size: int) -> np.ndarray:
    """Polyline from one canvas edge to past the far side, heading kept within 35 degrees."""
    edge = int(rng.integers(4))
    along = rng.uniform(0.25, 0.75) * size
    base = {0: np.pi / 2, 1: -np.pi / 2, 2: 0.0, 3: np.pi}[edge]  # top, bottom, left, right
    start = {0: (along, 0.0), 1: (along, float(size)), 2: (0.0, along), 3: (float(size), along)}[edge]
    heading = base + rng.uniform(-0.35, 0.35)
    pts = [np.array(start)]
    limit = np.deg2rad(35)
    for _ in range(4 * size):
        heading = float(np.clip(heading + rng.normal(0, 0.2), base - limit, base + limit))
        p = pts[-1] + 4.0 * np.array([np.cos(heading), np.sin(heading)])
        pts.append(p)
        if not (-1 <= p[0] <= size + 1 and -1 <= p[1] <= size + 1):
            break
    return np.array(pts)


def _path_length(poly: np.ndarray, size: int) -> float:
    inside = np.clip(poly, 0, size)
    return float(np.linalg.norm(np.diff(inside, axis=0), axis=1).sum())


def _smooth_noise(rng, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells + 1, cells + 1))
    pos = np.linspace(0, cells, size)
    i0 = np.minimum(pos.astype(int), cells - 1)
    f = pos - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _generate_one(config: SynthConfig, index: int) -> Sample:
    rng = np.random.default_rng([config.seed, index])
    s = config.size
    py, px = np.mgrid[0:s, 0:s] + 0.5

    for _ in range(50):
        roads = []
        road = np.zeros((s, s), bool)
        for _ in range(int(rng.integers(config.road_count[0], config.road_count[1] + 1))):
            for _ in range(20):
                poly = _random_walk(rng, s)
                if _path_length(poly, s) >= 0.8 * s:
                    break
            width = rng.uniform(*config.road_width)
            this = np.zeros((s, s), bool)
            for a, b in zip(poly[:-1], poly[1:]):
                this |= _segment_distance(px, py, a, b) <= width / 2
            roads.append((poly, this))
            road |= this
        frac = road.mean()
        if config.road_fraction[0] <= frac <= config.road_fraction[1] or not roads:
            break

    base = rng.uniform([0.25, 0.35, 0.15], [0.45, 0.55, 0.3])
    texture = _smooth_noise(rng, s, max(2, s // 8)) - 0.5
    image = base[:, None, None] + 0.25 * texture[None] + config.noise * rng.normal(size=(3, s, s))
    road_color = rng.uniform(0.55, 0.75)
    road_pix = road_color + 0.5 * config.noise * rng.normal(size=(s, s))
    image = np.where(road[None], road_pix[None], image)

    occlusion = np.zeros((s, s), bool)
    n_occ = int(rng.integers(config.occluder_count[0], config.occluder_count[1] + 1)) if roads else 0
    for _ in range(n_occ):
        poly, this = roads[int(rng.integers(len(roads)))]
        endpoints = [np.clip(poly[0], 0, s - 1), np.clip(poly[-1], 0, s - 1)]
        for _ in range(10):
            # centre along the middle of the path keeps both boundary ends visible
            cum = np.concatenate([[0], np.cumsum(np.linalg.norm(np.diff(np.clip(poly, 0, s), axis=0), axis=1))])
            target = rng.uniform(0.3, 0.7) * cum[-1]
            k = int(np.clip(np.searchsorted(cum, target) - 1, 0, len(poly) - 2))
            t = (target - cum[k]) / max(cum[k + 1] - cum[k], 1e-9)
            centre = poly[k] + t * (poly[k + 1] - poly[k])
            ra, rb = rng.uniform(*config.occluder_radius, size=2)
            ang = rng.uniform(0, np.pi)
            c, sn = np.cos(ang), np.sin(ang)

            def inside(x, y):
                dx, dy = x - centre[0], y - centre[1]
                return ((dx * c + dy * sn) / ra) ** 2 + ((-dx * sn + dy * c) / rb) ** 2 <= 1.0

            if not any(inside(e[0] + 0.5, e[1] + 0.5) for e in endpoints):
                blob = inside(px, py)
                dark = rng.uniform([0.05, 0.12, 0.03], [0.15, 0.3, 0.1])
                shade = dark[:, None, None] + 0.5 * config.noise * rng.normal(size=(3, s, s))
                image = np.where(blob[None], shade, image)
                occlusion |= blob & road
                break

    return Sample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        mask=road[None].astype(np.float32),
        id=f"synth_{config.seed}_{index:05d}",
        occlusion=occlusion[None].astype(np.float32),
    )


def synth_generate(config: SynthConfig, n: int, start: int = 0) -> list:
    """``n`` samples; sample ``k`` depends only on ``(config, start + k)``."""
    if n < 0:
        raise ConfigurationError("sample count must be >= 0")
    return [_generate_one(config, start + k) for k in range(n)]
