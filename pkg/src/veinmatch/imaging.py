"""Grayscale rasters, ROI cropping, optical enhancement and perturbations.

All operators are pure: they never modify the input image and always return
a new :class:`GrayImage` of the same size (except :func:`crop_roi`).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, IngestionError, ParameterError

DEFAULT_LOG_SCALE = 255.0 / math.log(256.0)
DEFAULT_CLAHE_CLIP = 2.0
DEFAULT_CLAHE_TILES = (8, 8)


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5)


def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(_round_half_up(values), 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit grayscale raster stored as a ``(height, width)`` uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"image must be a non-empty 2-D raster, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
                raise ParameterError("image intensities must be finite")
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ParameterError("image intensities must lie in [0, 255]")
            if np.any(arr != np.round(arr)):
                raise ParameterError("image intensities must be integers")
            arr = arr.astype(np.uint8)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @classmethod
    def from_list(cls, width: int, height: int, pixels: Sequence[int]) -> "GrayImage":
        if width <= 0 or height <= 0:
            raise DimensionError("width and height must be positive")
        if len(pixels) != width * height:
            raise DimensionError(
                f"expected {width * height} pixels for {width}x{height}, got {len(pixels)}")
        return cls(np.asarray(pixels, dtype=np.int64).reshape(height, width))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def to_list(self) -> list[int]:
        return self.pixels.ravel().tolist()

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))

    def __repr__(self):
        return f"GrayImage({self.width}x{self.height})"


class EnhanceTag(str, enum.Enum):
    HIST_EQ = "hist"
    CLAHE = "clahe"
    LAPLACIAN = "laplacian"
    LOG = "log"


@dataclass(frozen=True)
class EnhanceMethod:
    """An enhancement operator with its parameters.

    ``clip_limit`` and ``tiles`` only apply to CLAHE, ``log_scale`` only to LOG.
    """

    tag: EnhanceTag
    clip_limit: float = DEFAULT_CLAHE_CLIP
    tiles: tuple[int, int] = DEFAULT_CLAHE_TILES
    log_scale: float = DEFAULT_LOG_SCALE

    def __post_init__(self):
        object.__setattr__(self, "tag", EnhanceTag(self.tag))
        self.validate()

    def validate(self):
        if self.tag is EnhanceTag.CLAHE:
            if not self.clip_limit > 1:
                raise ParameterError(f"CLAHE clip limit must be > 1, got {self.clip_limit}")
            ty, tx = self.tiles
            if ty < 1 or tx < 1:
                raise ParameterError(f"CLAHE tile grid must be at least 1x1, got {self.tiles}")
        if self.tag is EnhanceTag.LOG and not self.log_scale > 0:
            raise ParameterError(f"LOG scale must be > 0, got {self.log_scale}")


class PerturbTag(str, enum.Enum):
    BLUR = "blur"
    NOISE = "noise"
    ROTATE = "rotate"


@dataclass(frozen=True)
class Perturbation:
    tag: PerturbTag
    sigma: float = 0.0
    angle: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tag", PerturbTag(self.tag))
        if not self.sigma >= 0:
            raise ParameterError(f"perturbation sigma must be >= 0, got {self.sigma}")
        if self.seed < 0:
            raise ParameterError("perturbation seed must be unsigned")


# Defaults used by the robustness study; the flags override them.
DEFAULT_BLUR_SIGMA = 2.0
DEFAULT_NOISE_SIGMA = 10.0
DEFAULT_ROTATE_ANGLE = 10.0


def crop_roi(img: GrayImage, center_x: int, center_y: int, side: int) -> GrayImage:
    """Cut a ``side`` x ``side`` window centred on ``(center_x, center_y)``.

    Windows that would leave the frame are shifted back inside rather than
    padded.
    """
    if side <= 0:
        raise DimensionError(f"ROI side must be positive, got {side}")
    if side > img.width or side > img.height:
        raise DimensionError(
            f"ROI side {side} exceeds source dimensions {img.width}x{img.height}")
    x0 = int(center_x) - side // 2
    y0 = int(center_y) - side // 2
    x0 = min(max(x0, 0), img.width - side)
    y0 = min(max(y0, 0), img.height - side)
    return GrayImage(img.pixels[y0:y0 + side, x0:x0 + side].copy())


def _hist_equalize(px: np.ndarray) -> np.ndarray:
    hist = np.bincount(px.ravel(), minlength=256)
    cdf = np.cumsum(hist) / px.size
    lut = _to_u8(cdf * 255.0)
    return lut[px]


def _clahe_lut(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
    limit = max(clip_limit * tile.size / 256.0, 1.0)
    excess = np.sum(np.maximum(hist - limit, 0.0))
    hist = np.minimum(hist, limit) + excess / 256.0
    cdf = np.cumsum(hist) / tile.size
    return np.clip(cdf * 255.0, 0.0, 255.0)


def _clahe(px: np.ndarray, clip_limit: float, tiles: tuple[int, int]) -> np.ndarray:
    h, w = px.shape
    ty, tx = min(tiles[0], h), min(tiles[1], w)
    ys = np.linspace(0, h, ty + 1).round().astype(int)
    xs = np.linspace(0, w, tx + 1).round().astype(int)
    luts = np.empty((ty, tx, 256))
    for i in range(ty):
        for j in range(tx):
            luts[i, j] = _clahe_lut(px[ys[i]:ys[i + 1], xs[j]:xs[j + 1]], clip_limit)
    cy = (ys[:-1] + ys[1:] - 1) / 2.0
    cx = (xs[:-1] + xs[1:] - 1) / 2.0

    def axis_weights(centers, n):
        pos = np.arange(n, dtype=np.float64)
        hi = np.searchsorted(centers, pos, side="right")
        lo = np.clip(hi - 1, 0, len(centers) - 1)
        hi = np.clip(hi, 0, len(centers) - 1)
        span = centers[hi] - centers[lo]
        frac = np.where(span > 0, (pos - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
        return lo, hi, np.clip(frac, 0.0, 1.0)

    y_lo, y_hi, fy = axis_weights(cy, h)
    x_lo, x_hi, fx = axis_weights(cx, w)
    fy = fy[:, None]
    fx = fx[None, :]
    v = px.astype(np.intp)
    top = (1 - fx) * luts[y_lo[:, None], x_lo[None, :], v] + fx * luts[y_lo[:, None], x_hi[None, :], v]
    bot = (1 - fx) * luts[y_hi[:, None], x_lo[None, :], v] + fx * luts[y_hi[:, None], x_hi[None, :], v]
    return _to_u8((1 - fy) * top + fy * bot)


def _laplacian_sharpen(px: np.ndarray) -> np.ndarray:
    p = np.pad(px.astype(np.float64), 1, mode="edge")
    centre = p[1:-1, 1:-1]
    response = 4 * centre - p[:-2, 1:-1] - p[2:, 1:-1] - p[1:-1, :-2] - p[1:-1, 2:]
    return _to_u8(centre + response)


def enhance(img: GrayImage, method: EnhanceMethod) -> GrayImage:
    method.validate()
    px = img.pixels
    if method.tag is EnhanceTag.HIST_EQ:
        out = _hist_equalize(px)
    elif method.tag is EnhanceTag.CLAHE:
        out = _clahe(px, method.clip_limit, method.tiles)
    elif method.tag is EnhanceTag.LAPLACIAN:
        out = _laplacian_sharpen(px)
    else:
        out = _to_u8(method.log_scale * np.log1p(px.astype(np.float64)))
    return GrayImage(out)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(values: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian filter with edge-replicate padding (float output)."""
    arr = np.asarray(values, dtype=np.float64)
    if sigma == 0:
        return arr.copy()
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    padded = np.pad(arr, ((0, 0), (r, r)), mode="edge")
    rows = sum(k[i] * padded[:, i:i + arr.shape[1]] for i in range(len(k)))
    padded = np.pad(rows, ((r, r), (0, 0)), mode="edge")
    return sum(k[i] * padded[i:i + arr.shape[0], :] for i in range(len(k)))


def rotate_array(values: np.ndarray, angle_deg: float, fill: float = 0.0) -> np.ndarray:
    """Rotate about the image centre with bilinear sampling; exposed area gets ``fill``.

    Positive angles turn the content clockwise as displayed (y axis down).
    """
    arr = np.asarray(values, dtype=np.float64)
    h, w = arr.shape
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    # inverse map: output pixel -> source coordinate
    sx = c * dx + s * dy + cx
    sy = -s * dx + c * dy + cy
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros_like(arr)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + oy, x0 + ox
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        sample = np.where(inside, arr[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)], fill)
        out += wgt * sample
    return out


def perturb(img: GrayImage, p: Perturbation) -> GrayImage:
    px = img.pixels.astype(np.float64)
    if p.tag is PerturbTag.BLUR:
        out = gaussian_blur(px, p.sigma)
    elif p.tag is PerturbTag.NOISE:
        rng = np.random.default_rng(p.seed)
        out = px + rng.normal(0.0, p.sigma, size=px.shape)
    else:
        out = rotate_array(px, p.angle)
    return GrayImage(_to_u8(out))


def to_tensor(img: GrayImage) -> np.ndarray:
    """Scale intensities to [0, 1] as a ``(1, height, width)`` float64 array."""
    return (img.pixels.astype(np.float64) / 255.0)[None, :, :]


# --- binary PGM (P5, maxval 255) -------------------------------------------

def _pgm_tokens(data: bytes, count: int, path) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 2
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestionError(f"{path}: truncated PGM header")
        try:
            tokens.append(int(data[start:pos]))
        except ValueError:
            raise IngestionError(f"{path}: malformed PGM header") from None
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pgm(data: bytes, path="<bytes>") -> GrayImage:
    if data[:2] != b"P5":
        raise IngestionError(f"{path}: not a binary PGM (P5) file")
    (width, height, maxval), offset = _pgm_tokens(data, 3, path)
    if maxval != 255:
        raise IngestionError(f"{path}: only maxval 255 is supported, got {maxval}")
    if width <= 0 or height <= 0:
        raise IngestionError(f"{path}: invalid dimensions {width}x{height}")
    raster = data[offset:offset + width * height]
    if len(raster) != width * height:
        raise IngestionError(f"{path}: raster truncated")
    return GrayImage(np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy())


def encode_pgm(img: GrayImage) -> bytes:
    return b"P5\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()


def read_pgm(path) -> GrayImage:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"{path}: unreadable ({exc.strerror})") from exc
    return decode_pgm(data, path)


def write_pgm(path, img: GrayImage) -> None:
    Path(path).write_bytes(encode_pgm(img))


def read_image(path) -> GrayImage:
    """Load a PGM, or a PNG when Pillow is installed (converted losslessly to L)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError:  # pragma: no cover - optional dependency
            raise IngestionError(f"{path}: PNG import needs Pillow") from None
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "1"):
                raise IngestionError(f"{path}: PNG must be grayscale, got mode {im.mode}")
            return GrayImage(np.asarray(im.convert("L"), dtype=np.uint8))
    return read_pgm(path)
