"""Grayscale image preprocessing and training-time augmentation.

The deterministic pipeline applied to every incoming scan is
gamma correction -> bilinear resize -> normalization. Augmentation sits
between resize and normalization and is only used while training.

All rasters are 8-bit single-channel, row-major. File I/O is binary PGM
(P5, maxval 255). Raster payloads can optionally be deflate-compressed for
storage or transfer; the 128x128 raster is 16384 bytes uncompressed.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass

import numpy as np


class ImagingError(Exception):
    """Base error for preprocessing operations."""


class InvalidParameterError(ImagingError):
    """A preprocessing parameter is out of its valid range."""


class InvalidImageError(ImagingError):
    """Raster does not describe a usable image."""


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit grayscale raster. ``pixels`` is (height, width) uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if not isinstance(p, np.ndarray) or p.ndim != 2:
            raise InvalidImageError("pixels must be a 2-D array")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise InvalidImageError("image must have at least one pixel")
        if p.dtype != np.uint8:
            raise InvalidImageError(f"pixels must be uint8, got {p.dtype}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def tobytes(self) -> bytes:
        return np.ascontiguousarray(self.pixels).tobytes()

    @classmethod
    def from_bytes(cls, width: int, height: int, data: bytes) -> "GrayImage":
        if width < 1 or height < 1:
            raise InvalidImageError("empty image")
        if len(data) != width * height:
            raise InvalidImageError(
                f"raster length {len(data)} != {width}x{height}"
            )
        arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
        return cls(arr.copy())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, GrayImage)
            and self.pixels.shape == other.pixels.shape
            and bool(np.array_equal(self.pixels, other.pixels))
        )


@dataclass(frozen=True)
class PreprocessConfig:
    """Deterministic preprocessing knobs. gamma > 1 darkens the image."""

    gamma: float = 2.8
    target_side: int = 128

    def __post_init__(self):
        if self.gamma <= 0:
            raise InvalidParameterError("gamma must be > 0")
        if self.target_side < 8:
            raise InvalidParameterError("target_side must be >= 8")


@dataclass(frozen=True)
class AugmentConfig:
    """Random-transform ranges; each parameter is sampled independently and
    uniformly from its symmetric range. Flips are fair coin flips."""

    rotation_range: float = 0.0     # degrees
    width_shift: float = 0.0        # fraction of width
    height_shift: float = 0.0       # fraction of height
    shear_range: float = 0.0        # shear factor
    zoom_range: float = 0.0         # zoom in [1-z, 1+z]
    horizontal_flip: bool = False
    vertical_flip: bool = False
    fill_mode: str = "nearest"
    seed: int = 0

    def __post_init__(self):
        for name in ("rotation_range", "width_shift", "height_shift",
                     "shear_range", "zoom_range"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be >= 0")
        for name in ("width_shift", "height_shift", "shear_range",
                     "zoom_range"):
            if getattr(self, name) > 1:
                raise InvalidParameterError(f"{name} must be <= 1")
        if self.fill_mode != "nearest":
            raise InvalidParameterError("only fill_mode 'nearest' is supported")

    @classmethod
    def training_defaults(cls, seed: int = 0) -> "AugmentConfig":
        """The augmentation settings used for training runs."""
        return cls(rotation_range=30.0, width_shift=0.2, height_shift=0.2,
                   shear_range=0.2, zoom_range=0.2, horizontal_flip=True,
                   vertical_flip=True, seed=seed)


@dataclass(frozen=True)
class TransformSample:
    """One concrete draw of the augmentation parameters."""

    angle_deg: float
    shift_x: float          # pixels
    shift_y: float          # pixels
    shear: float
    zoom_x: float
    zoom_y: float
    hflip: bool
    vflip: bool


def _round_u8(values: np.ndarray) -> np.ndarray:
    # round half up, then clamp; np.round would round half to even
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def gamma_correct(img: GrayImage, gamma: float) -> GrayImage:
    """Remap intensities with O = (I/255)^gamma * 255, rounded half-up.

    gamma > 1 dims the image, gamma < 1 brightens it; endpoints 0 and 255
    are fixed for every gamma.
    """
    if gamma <= 0:
        raise InvalidParameterError("gamma must be > 0")
    lut = _round_u8((np.arange(256, dtype=np.float64) / 255.0) ** gamma * 255.0)
    return GrayImage(lut[img.pixels])


def resize_bilinear(img: GrayImage, side: int) -> GrayImage:
    """Resize to a square ``side`` x ``side`` raster with bilinear sampling.

    Uses half-pixel-centre source coordinates, so resizing to the input's
    own size is the identity and constant images stay constant.
    """
    if side < 1:
        raise InvalidParameterError("side must be >= 1")
    src = img.pixels.astype(np.float64)
    h, w = src.shape
    if h < 1 or w < 1:
        raise InvalidImageError("empty image")

    def axis_coords(n_src: int, n_dst: int):
        pos = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
        pos = np.clip(pos, 0.0, n_src - 1.0)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = pos - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, side)
    x0, x1, fx = axis_coords(w, side)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy[:, None]) + bot * fy[:, None]
    return GrayImage(_round_u8(out))


def normalize(img: GrayImage) -> np.ndarray:
    """Map intensities to [0, 1]; returns a (height, width, 1) float32 tensor."""
    return (img.pixels.astype(np.float32) / 255.0)[:, :, None]


def denormalize(tensor: np.ndarray) -> GrayImage:
    """Inverse of :func:`normalize` on 8-bit-representable values."""
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    return GrayImage(_round_u8(arr * 255.0))


def preprocess(img: GrayImage, cfg: PreprocessConfig) -> GrayImage:
    """The full deterministic pipeline: gamma correction then resize."""
    return resize_bilinear(gamma_correct(img, cfg.gamma), cfg.target_side)


def sample_transform(cfg: AugmentConfig, rng: np.random.Generator,
                     width: int, height: int) -> TransformSample:
    """Draw one augmentation transform. Always consumes the same number of
    random draws regardless of which ranges are zero, so a shared generator
    stays aligned across records."""
    angle = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    sx = rng.uniform(-cfg.width_shift, cfg.width_shift) * width
    sy = rng.uniform(-cfg.height_shift, cfg.height_shift) * height
    shear = rng.uniform(-cfg.shear_range, cfg.shear_range)
    zx = rng.uniform(1.0 - cfg.zoom_range, 1.0 + cfg.zoom_range)
    zy = rng.uniform(1.0 - cfg.zoom_range, 1.0 + cfg.zoom_range)
    hflip = cfg.horizontal_flip and bool(rng.integers(0, 2))
    vflip = cfg.vertical_flip and bool(rng.integers(0, 2))
    return TransformSample(angle, sx, sy, shear, zx, zy, hflip, vflip)


def apply_transform(img: GrayImage, sample: TransformSample) -> GrayImage:
    """Apply one sampled affine transform about the image centre.

    Out-of-bounds source coordinates are clamped to the nearest edge pixel
    (fill_mode nearest). The identity sample reproduces the input exactly.
    """
    h, w = img.pixels.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    theta = np.deg2rad(sample.angle_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    shear = np.array([[1.0, sample.shear], [0.0, 1.0]])
    zoom = np.diag([sample.zoom_x, sample.zoom_y])
    flip = np.diag([-1.0 if sample.hflip else 1.0,
                    -1.0 if sample.vflip else 1.0])
    # forward map: out = rot @ shear @ zoom @ flip @ (in - c) + c + t
    fwd = rot @ shear @ zoom @ flip
    inv = np.linalg.inv(fwd)

    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dx = xs - cx - sample.shift_x
    dy = ys - cy - sample.shift_y
    src_x = inv[0, 0] * dx + inv[0, 1] * dy + cx
    src_y = inv[1, 0] * dx + inv[1, 1] * dy + cy

    src_x = np.clip(src_x, 0.0, w - 1.0)
    src_y = np.clip(src_y, 0.0, h - 1.0)
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = src_x - x0
    fy = src_y - y0

    p = img.pixels.astype(np.float64)
    top = p[y0, x0] * (1 - fx) + p[y0, x1] * fx
    bot = p[y1, x0] * (1 - fx) + p[y1, x1] * fx
    return GrayImage(_round_u8(top * (1 - fy) + bot * fy))


def augment(img: GrayImage, cfg: AugmentConfig,
            rng: np.random.Generator | int | None = None) -> GrayImage:
    """Random label-preserving transform of ``img``; deterministic given the
    generator state (or ``cfg.seed`` when none is passed)."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    elif isinstance(rng, int):
        rng = np.random.default_rng(rng)
    sample = sample_transform(cfg, rng, img.width, img.height)
    return apply_transform(img, sample)


# --- PGM (P5) I/O ---------------------------------------------------------

_PGM_HEADER = re.compile(rb"^P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def encode_pgm(img: GrayImage) -> bytes:
    return b"P5\n%d %d\n255\n" % (img.width, img.height) + img.tobytes()


def decode_pgm(data: bytes) -> GrayImage:
    m = _PGM_HEADER.match(data)
    if not m:
        raise InvalidImageError("not a binary PGM (P5) file")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise InvalidImageError(f"unsupported maxval {maxval} (must be 255)")
    raster = data[m.end():m.end() + width * height]
    return GrayImage.from_bytes(width, height, raster)


def write_pgm(img: GrayImage, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img))


def read_pgm(path) -> GrayImage:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


# --- optional lossless raster compression ----------------------------------

def compress_raster(img: GrayImage, level: int = 9) -> bytes:
    """Deflate the raw raster. Useful when the link budget wants paying back
    below the 16 KB ceiling; no particular ratio is guaranteed."""
    return zlib.compress(img.tobytes(), level)


def decompress_raster(data: bytes, width: int, height: int) -> GrayImage:
    return GrayImage.from_bytes(width, height, zlib.decompress(data))
