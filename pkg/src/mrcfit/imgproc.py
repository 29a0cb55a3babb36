"""Grayscale images, foreground bounding boxes, and image distances.

Images are immutable float64 rasters in [0, 1] where 1.0 is the white
background.  All distances are "lower is better": PSNR and SSIM enter
negated so that 0 or the metric's own floor is the identical-image value.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage

from .errors import BboxOutOfBounds, DimensionMismatch, NoForeground, TooSmall

DEFAULT_FG_TAU = 0.0625  # foreground = pixels darker than 1 - tau
PSNR_CAP_DB = 100.0

_SSIM_WINDOW = 8
_SSIM_STRIDE = 4
_SSIM_C1 = (0.01 * 1.0) ** 2
_SSIM_C2 = (0.03 * 1.0) ** 2
_MSGD_SCALES = (1, 2, 4)
_MSGD_MIN_SIDE = 4


class MetricKind(Enum):
    """Image distance selector."""

    L1 = "l1"
    L2 = "l2"
    PSNR_NEG = "psnr_neg"
    SSIM_NEG = "ssim_neg"
    MSGD = "msgd"

    @property
    def floor(self) -> float:
        """Distance of an image to itself (the metric's minimum)."""
        if self is MetricKind.PSNR_NEG:
            return -PSNR_CAP_DB
        if self is MetricKind.SSIM_NEG:
            return -1.0
        return 0.0


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable grayscale raster, shape (height, width), values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise DimensionMismatch(f"image must be a non-empty 2-d array, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def full(cls, height: int, width: int, value: float) -> "Image":
        return cls(np.full((height, width), value, dtype=np.float64))


@dataclass(frozen=True)
class SquareBbox:
    """Inclusive pixel bounds of a square region."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise BboxOutOfBounds(f"empty bbox {self}")
        if self.x_max - self.x_min != self.y_max - self.y_min:
            raise BboxOutOfBounds(f"bbox is not square: {self}")

    @property
    def side(self) -> int:
        return self.x_max - self.x_min + 1


def foreground_mask(img: Image, tau: float = DEFAULT_FG_TAU) -> np.ndarray:
    """Boolean mask of pixels darker than the white background by more than tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    return img.data < 1.0 - tau


def _axis_span(lo: int, hi: int, side: int, limit: int) -> int:
    """Start index of a length-`side` window covering [lo, hi] inside [0, limit).

    The window is centered on the covered span; an odd leftover is biased
    toward the smaller coordinate, and the window is shifted (never shrunk)
    back inside the bounds.
    """
    extra = side - (hi - lo + 1)
    start = lo - (extra + 1) // 2
    return min(max(start, 0), limit - side)


def compute_square_bbox(img: Image, tau: float = DEFAULT_FG_TAU) -> SquareBbox:
    """Smallest square window (shifted into bounds) around the foreground."""
    mask = foreground_mask(img, tau)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise NoForeground(f"no pixel below {1.0 - tau:.4f}")
    r_lo, r_hi = int(rows[0]), int(rows[-1])
    c_lo, c_hi = int(cols[0]), int(cols[-1])
    side = max(r_hi - r_lo + 1, c_hi - c_lo + 1)
    if side > min(img.height, img.width):
        raise BboxOutOfBounds(
            f"square side {side} exceeds image bounds {img.width}x{img.height}"
        )
    y0 = _axis_span(r_lo, r_hi, side, img.height)
    x0 = _axis_span(c_lo, c_hi, side, img.width)
    return SquareBbox(x_min=x0, y_min=y0, x_max=x0 + side - 1, y_max=y0 + side - 1)


def crop_and_resize(img: Image, bbox: SquareBbox, res: int) -> Image:
    """Crop to `bbox` and bilinearly resample to res x res.

    Sample coordinates span the crop corner-to-corner, so a full-image crop
    resampled at its own resolution reproduces the input bit-exactly.
    """
    if res < 2:
        raise ValueError(f"res must be >= 2, got {res}")
    if bbox.x_min < 0 or bbox.y_min < 0 or bbox.x_max >= img.width or bbox.y_max >= img.height:
        raise BboxOutOfBounds(f"{bbox} outside {img.width}x{img.height} image")
    crop = img.data[bbox.y_min:bbox.y_max + 1, bbox.x_min:bbox.x_max + 1]
    side = bbox.side
    if side == 1:
        out = np.full((res, res), crop[0, 0], dtype=np.float64)
        return Image(out)
    coords = np.linspace(0.0, side - 1.0, res)
    lo = np.floor(coords).astype(np.int64)
    lo = np.minimum(lo, side - 2)  # keep the interpolation cell in range at the far edge
    frac = coords - lo
    top = crop[lo][:, lo]
    right = crop[lo][:, lo + 1]
    bottom = crop[lo + 1][:, lo]
    diag = crop[lo + 1][:, lo + 1]
    fy = frac[:, None]
    fx = frac[None, :]
    out = (top * (1 - fy) * (1 - fx) + right * (1 - fy) * fx
           + bottom * fy * (1 - fx) + diag * fy * fx)
    return Image(np.clip(out, 0.0, 1.0))


def _require_same_shape(a: Image, b: Image) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionMismatch(f"image shapes differ: {a.data.shape} vs {b.data.shape}")


def _ssim_mean(a: np.ndarray, b: np.ndarray) -> float:
    h, w = a.shape
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise TooSmall(f"SSIM needs at least {_SSIM_WINDOW}x{_SSIM_WINDOW}, got {h}x{w}")
    vals = []
    for y in range(0, h - _SSIM_WINDOW + 1, _SSIM_STRIDE):
        for x in range(0, w - _SSIM_WINDOW + 1, _SSIM_STRIDE):
            wa = a[y:y + _SSIM_WINDOW, x:x + _SSIM_WINDOW]
            wb = b[y:y + _SSIM_WINDOW, x:x + _SSIM_WINDOW]
            mu_a = wa.mean()
            mu_b = wb.mean()
            var_a = (wa * wa).mean() - mu_a * mu_a
            var_b = (wb * wb).mean() - mu_b * mu_b
            cov = (wa * wb).mean() - mu_a * mu_b
            num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
            den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
            vals.append(num / den)
    return float(np.mean(vals))


def pixel_distance(a: Image, b: Image, kind: MetricKind) -> float:
    """Single-scale image distance; lower is better, symmetric in (a, b)."""
    if kind is MetricKind.MSGD:
        raise ValueError("use msgd_distance for the multi-scale gradient metric")
    _require_same_shape(a, b)
    if kind is MetricKind.L1:
        return float(np.mean(np.abs(a.data - b.data)))
    mse = float(np.mean((a.data - b.data) ** 2))
    if kind is MetricKind.L2:
        return mse
    if kind is MetricKind.PSNR_NEG:
        psnr = PSNR_CAP_DB if mse <= 0.0 else 10.0 * math.log10(1.0 / mse)
        return -min(PSNR_CAP_DB, psnr)
    return -_ssim_mean(a.data, b.data)


def _box_downsample(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape
    trimmed = arr[:h - h % 2, :w - w % 2]
    return trimmed.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _grad_maps(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = (arr[:, 2:] - arr[:, :-2]) * 0.5
    gy = (arr[2:, :] - arr[:-2, :]) * 0.5
    return gx, gy


def msgd_distance(a: Image, b: Image) -> float:
    """Multi-scale gradient difference, the perceptual-distance stand-in.

    For scale factors 1, 2, 4: box-downsample both images, take horizontal and
    vertical central-difference gradient maps, and average the absolute
    gradient differences; the result is the mean over the three scales.
    Flat regions contribute nothing, so the metric reacts to edge structure
    rather than absolute intensity.
    """
    _require_same_shape(a, b)
    if a.height < 8 or a.width < 8:
        raise TooSmall(f"msgd needs at least 8x8, got {a.height}x{a.width}")
    da, db = a.data, b.data
    per_scale = []
    for scale in _MSGD_SCALES:
        passes = scale.bit_length() - 1
        sa, sb = da, db
        for _ in range(passes):
            if min(sa.shape) // 2 < _MSGD_MIN_SIDE:
                raise TooSmall(f"scale {scale} drops below {_MSGD_MIN_SIDE}px")
            sa = _box_downsample(sa)
            sb = _box_downsample(sb)
        gxa, gya = _grad_maps(sa)
        gxb, gyb = _grad_maps(sb)
        per_scale.append(0.5 * (np.mean(np.abs(gxa - gxb)) + np.mean(np.abs(gya - gyb))))
    return float(np.mean(per_scale))


def image_distance(a: Image, b: Image, kind: MetricKind) -> float:
    """Dispatch over all metric kinds, including the multi-scale one."""
    if kind is MetricKind.MSGD:
        return msgd_distance(a, b)
    return pixel_distance(a, b, kind)


def save_png(img: Image, path: str | Path) -> None:
    """Write as 8-bit grayscale PNG; intensity i maps to round(i * 255)."""
    quantized = np.round(img.data * 255.0).astype(np.uint8)
    _PILImage.fromarray(quantized, mode="L").save(Path(path), format="PNG")


def load_png(path: str | Path) -> Image:
    with _PILImage.open(Path(path)) as handle:
        arr = np.asarray(handle.convert("L"), dtype=np.float64)
    return Image(arr / 255.0)


def save_raw(img: Image, path: str | Path) -> None:
    """Lossless raw format: u32 LE width, u32 LE height, then f64 LE row-major."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", img.width, img.height))
        fh.write(img.data.astype("<f8").tobytes(order="C"))


def load_raw(path: str | Path) -> Image:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DimensionMismatch(f"raw image file too short: {len(raw)} bytes")
    width, height = struct.unpack_from("<II", raw, 0)
    expected = 8 + 8 * width * height
    if len(raw) != expected:
        raise DimensionMismatch(f"raw image payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f8", offset=8).reshape(height, width)
    return Image(data)
