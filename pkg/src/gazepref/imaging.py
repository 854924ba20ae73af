"""Raster images, integral images, geometric transforms and binary PNM I/O."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import BinaryIO, Iterator, Union

import numpy as np


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ValueError(f"negative rect offset: {self}")
        if self.w < 1 or self.h < 1:
            raise ValueError(f"rect must have positive size: {self}")

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def right(self) -> int:
        return self.x + self.w

    @property
    def bottom(self) -> int:
        return self.y + self.h

    def fits(self, width: int, height: int) -> bool:
        return self.right <= width and self.bottom <= height

    def intersects(self, other: Rect) -> bool:
        return (self.x < other.right and other.x < self.right
                and self.y < other.bottom and other.y < self.bottom)

    def contains(self, other: Rect) -> bool:
        return (self.x <= other.x and self.y <= other.y
                and other.right <= self.right and other.bottom <= self.bottom)


def _frozen_u8(pixels, ndim: int) -> np.ndarray:
    arr = np.asarray(pixels)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d pixel array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("sample values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    arr = np.array(arr, dtype=np.uint8, copy=True, order="C")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit single-channel image; ``pixels`` has shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = _frozen_u8(self.pixels, 2)
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image dimensions must be >= 1")
        object.__setattr__(self, "pixels", arr)

    @classmethod
    def from_samples(cls, width: int, height: int, samples) -> GrayImage:
        samples = np.asarray(samples)
        if samples.size != width * height:
            raise ValueError(f"expected {width * height} samples, got {samples.size}")
        return cls(samples.reshape(height, width))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def samples(self) -> np.ndarray:
        return self.pixels.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return f"GrayImage({self.width}x{self.height})"


@dataclass(frozen=True, eq=False)
class RgbImage:
    """8-bit interleaved RGB image; ``pixels`` has shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = _frozen_u8(self.pixels, 3)
        if arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"bad RGB shape {arr.shape}")
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def samples(self) -> np.ndarray:
        return self.pixels.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, RgbImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return f"RgbImage({self.width}x{self.height})"


Image = Union[GrayImage, RgbImage]


def to_grayscale(img: Image) -> GrayImage:
    """Luma 0.299 R + 0.587 G + 0.114 B, rounded half up."""
    if isinstance(img, GrayImage):
        return img
    p = img.pixels.astype(np.int32)
    # integer weights keep the half-up rounding exact
    y = (299 * p[..., 0] + 587 * p[..., 1] + 114 * p[..., 2] + 500) // 1000
    return GrayImage(np.clip(y, 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# Integral images
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class IntegralImage:
    """Summed-area tables of shape (height+1, width+1).

    ``sums[j, i]`` is the sum of all pixels with y < j and x < i; ``sqsums``
    holds the same for squared intensities.
    """

    sums: np.ndarray
    sqsums: np.ndarray

    @property
    def width(self) -> int:
        return self.sums.shape[1] - 1

    @property
    def height(self) -> int:
        return self.sums.shape[0] - 1


def integral(img: GrayImage) -> IntegralImage:
    h, w = img.pixels.shape
    p = img.pixels.astype(np.uint64)
    sums = np.zeros((h + 1, w + 1), dtype=np.uint64)
    sqsums = np.zeros((h + 1, w + 1), dtype=np.uint64)
    sums[1:, 1:] = p.cumsum(axis=0).cumsum(axis=1)
    sqsums[1:, 1:] = (p * p).cumsum(axis=0).cumsum(axis=1)
    sums.setflags(write=False)
    sqsums.setflags(write=False)
    return IntegralImage(sums, sqsums)


def _check_inside(ii: IntegralImage, r: Rect) -> None:
    if not r.fits(ii.width, ii.height):
        raise IndexError(f"{r} outside {ii.width}x{ii.height} image")


def _corners(table: np.ndarray, r: Rect) -> int:
    return (int(table[r.bottom, r.right]) - int(table[r.y, r.right])
            - int(table[r.bottom, r.x]) + int(table[r.y, r.x]))


def rect_sum(ii: IntegralImage, r: Rect) -> int:
    _check_inside(ii, r)
    return _corners(ii.sums, r)


def rect_sqsum(ii: IntegralImage, r: Rect) -> int:
    _check_inside(ii, r)
    return _corners(ii.sqsums, r)


def window_mean_var(ii: IntegralImage, r: Rect) -> tuple[float, float]:
    _check_inside(ii, r)
    area = r.area
    mean = _corners(ii.sums, r) / area
    var = _corners(ii.sqsums, r) / area - mean * mean
    return mean, max(var, 0.0)


# ---------------------------------------------------------------------------
# Geometric transforms
# ---------------------------------------------------------------------------

def translate(img: GrayImage, dx: int, dy: int) -> GrayImage:
    """Shift content by (dx, dy) pixels, filling with replicated edge pixels."""
    if abs(dx) >= img.width or abs(dy) >= img.height:
        raise ValueError(f"shift ({dx}, {dy}) too large for {img.width}x{img.height}")
    xs = np.clip(np.arange(img.width) - dx, 0, img.width - 1)
    ys = np.clip(np.arange(img.height) - dy, 0, img.height - 1)
    return GrayImage(img.pixels[np.ix_(ys, xs)])


def _bilinear(src: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    h, w = src.shape
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    s = src.astype(np.float64)
    top = s[y0, x0] * (1 - fx) + s[y0, x1] * fx
    bot = s[y1, x0] * (1 - fx) + s[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


MAX_ROTATION_DEG = 45.0


def rotate(img: GrayImage, degrees: float) -> GrayImage:
    """Rotate about the image center; positive angles turn content counter-clockwise."""
    if not abs(degrees) <= MAX_ROTATION_DEG:
        raise ValueError(f"rotation {degrees} deg outside +/-{MAX_ROTATION_DEG}")
    if degrees == 0:
        return GrayImage(img.pixels)
    h, w = img.pixels.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = xx - cx, yy - cy
    # inverse map: output pixel -> source location
    sx = c * u - s * v + cx
    sy = s * u + c * v + cy
    return GrayImage(_bilinear(img.pixels, sx, sy))


def resize(img: GrayImage, w: int, h: int) -> GrayImage:
    """Bilinear resampling with pixel-center alignment."""
    if w < 1 or h < 1:
        raise ValueError(f"invalid target size {w}x{h}")
    if (w, h) == (img.width, img.height):
        return GrayImage(img.pixels)
    sx = (np.arange(w) + 0.5) * (img.width / w) - 0.5
    sy = (np.arange(h) + 0.5) * (img.height / h) - 0.5
    gx, gy = np.meshgrid(sx, sy)
    return GrayImage(_bilinear(img.pixels, gx, gy))


def crop(img: GrayImage, r: Rect) -> GrayImage:
    if not r.fits(img.width, img.height):
        raise IndexError(f"{r} outside {img.width}x{img.height} image")
    return GrayImage(img.pixels[r.y:r.bottom, r.x:r.right])


# ---------------------------------------------------------------------------
# Binary PNM (P5 / P6, maxval 255)
# ---------------------------------------------------------------------------

class PnmError(ValueError):
    pass


class PnmHeaderError(PnmError):
    pass


class PnmMaxvalError(PnmError):
    pass


class PnmTruncatedError(PnmError):
    pass


_WS = b" \t\n\r\v\f"


def _read_token(stream: BinaryIO, first: bool = False) -> bytes | None:
    tok = bytearray()
    while True:
        ch = stream.read(1)
        if not ch:
            if tok:
                return bytes(tok)
            if first:
                return None
            raise PnmHeaderError("unexpected end of data in header")
        if ch == b"#" and not tok:
            while ch not in (b"\n", b"\r", b""):
                ch = stream.read(1)
            continue
        if ch in _WS:
            if tok:
                return bytes(tok)
            continue
        tok += ch
        if first and len(tok) == 2:
            return bytes(tok)


def _header_int(stream: BinaryIO, what: str) -> int:
    tok = _read_token(stream)
    if not tok.isdigit():
        raise PnmHeaderError(f"bad {what} {tok!r}")
    return int(tok)


def read_pnm_from(stream: BinaryIO) -> Image | None:
    """Read one image from a binary stream; None on clean end of stream."""
    magic = _read_token(stream, first=True)
    if magic is None:
        return None
    if magic not in (b"P5", b"P6"):
        raise PnmHeaderError(f"unsupported magic {magic!r}")
    width = _header_int(stream, "width")
    height = _header_int(stream, "height")
    if width < 1 or height < 1:
        raise PnmHeaderError(f"bad dimensions {width}x{height}")
    maxval = _header_int(stream, "maxval")
    if maxval != 255:
        raise PnmMaxvalError(f"unsupported maxval {maxval}")
    # _read_token consumed exactly one whitespace byte after maxval
    channels = 1 if magic == b"P5" else 3
    n = width * height * channels
    payload = stream.read(n)
    if len(payload) != n:
        raise PnmTruncatedError(f"expected {n} payload bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        return GrayImage(arr.reshape(height, width))
    return RgbImage(arr.reshape(height, width, 3))


def read_pnm(data: bytes) -> Image:
    img = read_pnm_from(io.BytesIO(data))
    if img is None:
        raise PnmHeaderError("empty input")
    return img


def iter_pnm(stream: BinaryIO) -> Iterator[Image]:
    """Yield images from a stream of concatenated PNM files."""
    while True:
        img = read_pnm_from(stream)
        if img is None:
            return
        yield img


def write_pnm(img: Image) -> bytes:
    magic = b"P5" if isinstance(img, GrayImage) else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + img.pixels.tobytes()


def load_pnm(path) -> Image:
    with open(path, "rb") as fh:
        return read_pnm(fh.read())


def save_pnm(path, img: Image) -> None:
    with open(path, "wb") as fh:
        fh.write(write_pnm(img))
