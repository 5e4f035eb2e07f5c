"""Image and mask data model, file I/O, and atmospheric haze synthesis.

Every picture handled by this package is an H x W x 3 float32 array with
values in [0, 1] and RGB channel order.  The :class:`Image` wrapper locks
the array and enforces that contract once, so downstream code can rely on
it.  Masks are plain boolean H x W arrays wrapped in :class:`RegionMask`.

Haze is synthesized with the standard scattering model

    hazy = clean * t + airlight * (1 - t),   t = exp(-beta * depth)

which also powers the seeded toy scenes used for desk-scale training and
regression tests.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

MIN_SIDE = 16
_RANGE_SLACK = 1e-3


class ImageFormatError(ValueError):
    """File exists but cannot be decoded as an 8- or 16-bit RGB raster."""


def _lock(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Image:
    """An RGB picture: H x W x 3 float32, values in [0, 1], sides >= 16.

    Value semantics: the pixel array is copied and made read-only on
    construction, so instances can be shared freely between workers.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got shape {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ValueError(f"image sides must be >= {MIN_SIDE}, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixels contain non-finite values")
        px = px.astype(np.float32, copy=True)
        lo, hi = float(px.min()), float(px.max())
        if lo < -_RANGE_SLACK or hi > 1.0 + _RANGE_SLACK:
            raise ValueError(f"pixel values outside [0, 1]: min={lo:.6g} max={hi:.6g}")
        np.clip(px, 0.0, 1.0, out=px)
        object.__setattr__(self, "pixels", _lock(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    @classmethod
    def constant(cls, height: int, width: int, rgb=(0.5, 0.5, 0.5)) -> "Image":
        px = np.empty((height, width, 3), dtype=np.float32)
        px[:] = np.asarray(rgb, dtype=np.float32)
        return cls(px)


@dataclass(frozen=True)
class RegionMask:
    """Binary H x W partition of an image into a region and its complement."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {b.shape}")
        object.__setattr__(self, "bits", _lock(b.astype(bool, copy=True)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape  # type: ignore[return-value]

    @property
    def coverage(self) -> float:
        return float(self.bits.mean())

    def invert(self) -> "RegionMask":
        return RegionMask(~self.bits)

    @classmethod
    def all_false(cls, height: int, width: int) -> "RegionMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def all_true(cls, height: int, width: int) -> "RegionMask":
        return cls(np.ones((height, width), dtype=bool))


@dataclass(frozen=True)
class HazeParams:
    """Scattering-model parameters: beta >= 0, airlight in [0.6, 1.0] per channel."""

    beta: float
    airlight: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        a = np.asarray(self.airlight, dtype=np.float32).reshape(3)
        if np.any(a < 0.6 - 1e-6) or np.any(a > 1.0 + 1e-6):
            raise ValueError(f"airlight channels must lie in [0.6, 1.0], got {a}")
        d = np.asarray(self.depth, dtype=np.float32)
        if d.ndim != 2:
            raise ValueError(f"depth must be 2-D, got shape {d.shape}")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("depth must be finite and non-negative")
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "airlight", _lock(a))
        object.__setattr__(self, "depth", _lock(d))


def _pixels(image) -> np.ndarray:
    """Accept an Image or a bare H x W x 3 array (small test fixtures)."""
    if isinstance(image, Image):
        return image.pixels
    px = np.asarray(image, dtype=np.float32)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 pixels, got shape {px.shape}")
    return px


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def load_image(path) -> Image:
    """Load an 8- or 16-bit PNG/JPEG as an Image scaled to [0, 1], RGB order."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such image file: {p}")
    raw = cv2.imread(str(p), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageFormatError(f"cannot decode image file: {p}")
    if raw.ndim == 2:
        raw = np.stack([raw] * 3, axis=-1)
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    if raw.dtype == np.uint8:
        px = raw.astype(np.float32) / 255.0
    elif raw.dtype == np.uint16:
        px = raw.astype(np.float32) / 65535.0
    else:
        raise ImageFormatError(f"unsupported pixel depth {raw.dtype} in {p}")
    return Image(px[:, :, ::-1])  # BGR -> RGB


def save_image(image: Image, path, bit_depth: int = 8) -> None:
    """Write an Image as PNG (or JPEG by extension); bit_depth 8 or 16."""
    px = _pixels(image)[:, :, ::-1]  # RGB -> BGR
    if bit_depth == 8:
        data = np.rint(px * 255.0).astype(np.uint8)
    elif bit_depth == 16:
        data = np.rint(px * 65535.0).astype(np.uint16)
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), data):
        raise IOError(f"failed to write image: {path}")


def load_mask(path) -> RegionMask:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such mask file: {p}")
    raw = cv2.imread(str(p), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise ImageFormatError(f"cannot decode mask file: {p}")
    return RegionMask(raw > 127)


def save_mask(mask: RegionMask, path) -> None:
    data = np.where(mask.bits, 255, 0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), data):
        raise IOError(f"failed to write mask: {path}")


# ---------------------------------------------------------------------------
# region compositing and dark-channel statistics
# ---------------------------------------------------------------------------

def composite(image, mask: RegionMask, fill=(0.5, 0.5, 0.5)) -> Image:
    """Keep pixels where the mask is true, replace the rest with a flat fill."""
    px = _pixels(image)
    if mask.bits.shape != px.shape[:2]:
        raise ValueError(f"mask shape {mask.bits.shape} != image shape {px.shape[:2]}")
    fill_px = np.asarray(fill, dtype=np.float32).reshape(1, 1, 3)
    out = np.where(mask.bits[:, :, None], px, fill_px)
    return Image(out)


def dark_channel(image, patch: int = 15) -> np.ndarray:
    """Per-pixel min over channels, then min over a patch x patch window.

    Border windows are clipped to the image, which the nearest-replication
    minimum filter reproduces exactly.
    """
    if patch < 1 or patch % 2 == 0:
        raise ValueError(f"patch must be an odd integer >= 1, got {patch}")
    px = _pixels(image)
    channel_min = px.min(axis=2)
    if patch == 1:
        return channel_min
    return ndimage.minimum_filter(channel_min, size=patch, mode="nearest")


# ---------------------------------------------------------------------------
# haze synthesis
# ---------------------------------------------------------------------------

def synthesize_haze(clean, params: HazeParams) -> Image:
    """Apply the scattering model to a clean image.

    beta = 0 returns the clean image bit-exactly (transmission is 1).
    """
    px = _pixels(clean)
    if params.depth.shape != px.shape[:2]:
        raise ValueError(
            f"depth shape {params.depth.shape} != image shape {px.shape[:2]}"
        )
    t = np.exp(np.float32(-params.beta) * params.depth)[:, :, None]
    out = px * t + params.airlight.reshape(1, 1, 3) * (np.float32(1.0) - t)
    return Image(np.clip(out, 0.0, 1.0))


def synthetic_depth(
    height: int,
    width: int,
    rng: np.random.Generator,
    sky_rows: int = 0,
    far: float = 3.0,
    noise: float = 0.25,
) -> np.ndarray:
    """Vertical depth ramp (top = far) plus low-frequency noise.

    Rows above ``sky_rows`` are set to the ``far`` plateau so airlight
    dominates there, as it does for real skies.
    """
    ramp = np.linspace(1.0, 0.0, height, dtype=np.float32)[:, None]
    depth = np.broadcast_to(ramp, (height, width)).copy()
    coarse = rng.normal(0.0, noise, size=(5, 5)).astype(np.float32)
    depth += cv2.resize(coarse, (width, height), interpolation=cv2.INTER_LINEAR)
    np.clip(depth, 0.0, None, out=depth)
    if sky_rows > 0:
        depth[:sky_rows] = far
    return depth


def synthetic_scene(seed: int, size: int = 64) -> tuple[Image, int]:
    """Seeded toy outdoor scene: sky band on top, textured blocks below.

    Returns the clean image and the number of sky rows, so tests know the
    true sky/ground boundary.
    """
    rng = np.random.default_rng(seed)
    sky_rows = int(size * rng.uniform(0.25, 0.45))
    px = np.zeros((size, size, 3), dtype=np.float32)

    top = np.array(
        [rng.uniform(0.42, 0.58), rng.uniform(0.60, 0.72), rng.uniform(0.82, 0.94)],
        dtype=np.float32,
    )
    horizon = np.clip(top + np.float32(0.10), 0.0, 1.0)
    for r in range(sky_rows):
        w = r / max(sky_rows - 1, 1)
        px[r] = top * (1 - w) + horizon * w

    ground_base = np.array(
        [rng.uniform(0.20, 0.45), rng.uniform(0.22, 0.48), rng.uniform(0.18, 0.40)],
        dtype=np.float32,
    )
    px[sky_rows:] = ground_base
    for _ in range(int(rng.integers(8, 15))):
        r0 = int(rng.integers(sky_rows, size - 2))
        c0 = int(rng.integers(0, size - 2))
        r1 = int(min(size, r0 + rng.integers(3, size // 2)))
        c1 = int(min(size, c0 + rng.integers(3, size // 2)))
        px[r0:r1, c0:c1] = rng.uniform(0.05, 0.75, size=3).astype(np.float32)

    px += rng.normal(0.0, 0.015, size=px.shape).astype(np.float32)
    return Image(np.clip(px, 0.0, 1.0)), sky_rows


def toy_hazy_pairs(
    count: int,
    seed: int,
    size: int = 64,
    beta_range: tuple[float, float] = (0.6, 1.4),
    airlight_range: tuple[float, float] = (0.78, 0.88),
) -> list[tuple[Image, Image]]:
    """Seeded (hazy, clean) pairs from toy scenes and the scattering model.

    Shifting ``beta_range`` / ``airlight_range`` between corpora creates a
    controllable domain gap at desk scale.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        clean, sky_rows = synthetic_scene(int(rng.integers(0, 2**31)), size=size)
        depth = synthetic_depth(size, size, rng, sky_rows=sky_rows)
        base = rng.uniform(*airlight_range)
        airlight = np.clip(
            np.array([base - 0.02, base, base + 0.04], dtype=np.float32), 0.6, 1.0
        )
        params = HazeParams(
            beta=float(rng.uniform(*beta_range)), airlight=airlight, depth=depth
        )
        pairs.append((synthesize_haze(clean, params), clean))
    return pairs
