"""Quantize feature tensors to [0,1] and pack them into codec canvases.

All functions here are pure and operate on raw numpy arrays: the codec
round trip is never part of the autodiff graph. Layouts are bijective on
the used region, so ``unpack(pack(x)) == x`` bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Degenerate-range guard for channelwise bounds: a constant channel would
# otherwise divide by zero.
DEFAULT_MIN_RANGE = 1e-3

FLATTEN_GRAY = "flatten_gray"
FLATTEN_RGB = "flatten_rgb"
PIXEL_SHUFFLE = "pixel_shuffle"
DENSITY_MONO = "density_mono"

PACK_KINDS = (FLATTEN_GRAY, FLATTEN_RGB, PIXEL_SHUFFLE)


@dataclass(frozen=True)
class QuantSpec:
    """Affine [alpha, beta] -> [0, 1] mapping, global or per-channel.

    For ``absmax`` lower/upper are floats shared by all channels; for
    ``channelwise`` they are per-channel arrays.
    """

    scheme: str
    lower: np.ndarray | float
    upper: np.ndarray | float

    def __post_init__(self):
        if self.scheme not in ("absmax", "channelwise"):
            raise ValueError(f"unknown quantization scheme: {self.scheme}")
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if not np.all(hi > lo):
            raise ValueError("quantization bounds require upper > lower")
        object.__setattr__(self, "lower", lo if lo.ndim else float(lo))
        object.__setattr__(self, "upper", hi if hi.ndim else float(hi))

    def bounds_for(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bounds broadcast against x (channel axis first for per-channel)."""
        if self.scheme == "absmax":
            return (np.float64(self.lower), np.float64(self.upper))
        lo = np.asarray(self.lower)
        if lo.shape[0] != x.shape[0]:
            raise ValueError("per-channel bounds do not match channel count")
        extra = (1,) * (x.ndim - 1)
        return (np.asarray(self.lower).reshape((-1,) + extra),
                np.asarray(self.upper).reshape((-1,) + extra))

    def side_info_bits(self) -> int:
        """Transmitted payload for the bounds: 2 float32 per channel for
        channelwise; absmax ranges are preset constants and cost nothing."""
        if self.scheme == "absmax":
            return 0
        return 2 * 32 * np.asarray(self.lower).shape[0]


def estimate_channelwise_bounds(x: np.ndarray,
                                min_range: float = DEFAULT_MIN_RANGE) -> QuantSpec:
    """Per-channel central 95% range: (2.5th, 97.5th) percentiles.

    Intervals narrower than ``min_range`` are widened symmetrically.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x[0].size < 2:
        raise ValueError("need a [C, ...] tensor with at least 2 values per channel")
    flat = x.reshape(x.shape[0], -1)
    lo = np.percentile(flat, 2.5, axis=1)
    hi = np.percentile(flat, 97.5, axis=1)
    narrow = (hi - lo) < min_range
    if np.any(narrow):
        mid = 0.5 * (hi + lo)
        lo = np.where(narrow, mid - 0.5 * min_range, lo)
        hi = np.where(narrow, mid + 0.5 * min_range, hi)
    return QuantSpec("channelwise", lo, hi)


def quantize(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """clip((x - alpha) / (beta - alpha), 0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = spec.bounds_for(x)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def dequantize(x01: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """x01 * (beta - alpha) + alpha."""
    x01 = np.asarray(x01, dtype=np.float64)
    lo, hi = spec.bounds_for(x01)
    return x01 * (hi - lo) + lo


# ---------------------------------------------------------------------------
# canvases and packing layouts
# ---------------------------------------------------------------------------

@dataclass
class Canvas:
    """A 1- or 3-channel image in [0,1], the unit the codec consumes."""

    values: np.ndarray  # [channels, height, width]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] not in (1, 3):
            raise ValueError("canvas must be [1|3, H, W]")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("canvas contains non-finite values")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("canvas values must lie in [0, 1]")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def to_uint8(self) -> np.ndarray:
        """8-bit view: round-half-away-from-zero on value*255."""
        return np.floor(self.values * 255.0 + 0.5).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "Canvas":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)


def tile_grid(n: int) -> tuple[int, int]:
    """Near-square (rows, cols) with rows*cols >= n.

    rows is the largest divisor of n with rows <= ceil(sqrt(n)); a prime
    n > 3 is padded up to the next composite first.
    """
    if n < 1:
        raise ValueError("tile grid needs n >= 1")
    m = n
    if m > 3 and _is_prime(m):
        m += 1
        while _is_prime(m):
            m += 1
    cap = math.isqrt(m - 1) + 1  # ceil(sqrt(m))
    rows = max(d for d in range(1, cap + 1) if m % d == 0)
    return rows, m // rows


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    return all(n % d for d in range(2, math.isqrt(n) + 1))


@dataclass(frozen=True)
class PackLayout:
    kind: str
    source_shape: tuple[int, ...]
    grid: tuple[int, int]
    channels_out: int

    @property
    def canvas_shape(self) -> tuple[int, int, int]:
        rows, cols = self.grid
        if self.kind == DENSITY_MONO:
            _, dx, dz = self.source_shape
            return (1, rows * dx, cols * dz)
        _, h, w = self.source_shape
        return (self.channels_out, rows * h, cols * w)


def layout_for(kind: str, source_shape) -> PackLayout:
    """Compute the tile grid for a tensor shape under the given layout."""
    shape = tuple(int(s) for s in source_shape)
    if len(shape) != 3:
        raise ValueError("layouts operate on 3-D tensors")
    n = shape[0]
    if kind == FLATTEN_GRAY:
        return PackLayout(kind, shape, tile_grid(n), 1)
    if kind == FLATTEN_RGB:
        if n % 3 != 0:
            raise ValueError("flatten_rgb requires C divisible by 3")
        return PackLayout(kind, shape, tile_grid(n // 3), 3)
    if kind == PIXEL_SHUFFLE:
        if n % 3 != 0:
            raise ValueError("pixel_shuffle requires C divisible by 3")
        r = math.isqrt(n // 3)
        if r * r != n // 3:
            raise ValueError("pixel_shuffle requires C/3 to be a perfect square")
        return PackLayout(kind, shape, (r, r), 3)
    if kind == DENSITY_MONO:
        return PackLayout(kind, shape, tile_grid(n), 1)
    raise ValueError(f"unknown pack layout: {kind}")


def _tile_channels(x: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Stack [C, H, W] channels spatially into [rows*H, cols*W]; unused
    tiles are zero-filled."""
    c, h, w = x.shape
    padded = np.zeros((rows * cols, h, w), dtype=x.dtype)
    padded[:c] = x
    return (padded.reshape(rows, cols, h, w)
            .transpose(0, 2, 1, 3)
            .reshape(rows * h, cols * w))


def _untile_channels(img: np.ndarray, rows: int, cols: int, c: int,
                     h: int, w: int) -> np.ndarray:
    tiles = (img.reshape(rows, h, cols, w)
             .transpose(0, 2, 1, 3)
             .reshape(rows * cols, h, w))
    return tiles[:c].copy()


def pack_values(x01: np.ndarray, layout: PackLayout) -> np.ndarray:
    """Array-level packing (no value-range checks); see ``pack``."""
    x01 = np.asarray(x01, dtype=np.float64)
    if x01.shape != layout.source_shape:
        raise ValueError(
            f"tensor shape {x01.shape} does not match layout source "
            f"{layout.source_shape}")
    rows, cols = layout.grid
    if layout.kind == FLATTEN_GRAY:
        return _tile_channels(x01, rows, cols)[None]
    if layout.kind == FLATTEN_RGB:
        c = x01.shape[0]
        group = c // 3
        return np.stack([
            _tile_channels(x01[i * group:(i + 1) * group], rows, cols)
            for i in range(3)
        ])
    if layout.kind == PIXEL_SHUFFLE:
        c, h, w = x01.shape
        r = rows
        # out[ch, r*i + p, r*j + q] = x[ch*r*r + p*r + q, i, j]
        return (x01.reshape(3, r, r, h, w)
                .transpose(0, 3, 1, 4, 2)
                .reshape(3, h * r, w * r))
    if layout.kind == DENSITY_MONO:
        return _tile_channels(x01, rows, cols)[None]
    raise ValueError(f"unknown pack layout: {layout.kind}")


def unpack_values(canvas_values: np.ndarray, layout: PackLayout) -> np.ndarray:
    """Exact inverse of ``pack_values``; zero-padded tiles are discarded."""
    y = np.asarray(canvas_values, dtype=np.float64)
    if y.shape != layout.canvas_shape:
        raise ValueError(
            f"canvas shape {y.shape} does not match layout {layout.canvas_shape}")
    rows, cols = layout.grid
    c, h, w = layout.source_shape
    if layout.kind in (FLATTEN_GRAY, DENSITY_MONO):
        return _untile_channels(y[0], rows, cols, c, h, w)
    if layout.kind == FLATTEN_RGB:
        group = c // 3
        parts = [_untile_channels(y[i], rows, cols, group, h, w)
                 for i in range(3)]
        return np.concatenate(parts, axis=0)
    if layout.kind == PIXEL_SHUFFLE:
        r = rows
        return (y.reshape(3, h, r, w, r)
                .transpose(0, 2, 4, 1, 3)
                .reshape(c, h, w)
                .copy())
    raise ValueError(f"unknown pack layout: {layout.kind}")


def pack(x01: np.ndarray, layout: PackLayout) -> Canvas:
    """Pack a quantized [C, H, W] tensor into a codec canvas."""
    return Canvas(pack_values(x01, layout))


def unpack(canvas: Canvas, layout: PackLayout) -> np.ndarray:
    return unpack_values(canvas.values, layout)


def tile_density(d01: np.ndarray) -> Canvas:
    """Tile the [Dy, Dx, Dz] density slices into one monochrome canvas."""
    d01 = np.asarray(d01, dtype=np.float64)
    return pack(d01, layout_for(DENSITY_MONO, d01.shape))


def untile_density(canvas: Canvas, source_shape) -> np.ndarray:
    return unpack(canvas, layout_for(DENSITY_MONO, source_shape))
