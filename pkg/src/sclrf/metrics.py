"""Rate and quality metrics: PSNR, Bjontegaard delta rate, payload bits."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for signals in [0, 1]; identical inputs cap at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return -10.0 * np.log10(mse)


# ---------------------------------------------------------------------------
# decoder-side payload estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PayloadEntry:
    name: str
    num_elements: int
    num_dims: int
    entropy_bits: float
    header_bits: int

    @property
    def total_bits(self) -> float:
        return self.entropy_bits + self.header_bits


@dataclass
class PayloadReport:
    entries: list[PayloadEntry] = field(default_factory=list)

    @property
    def total_bits(self) -> float:
        return sum(e.total_bits for e in self.entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("tensor,n_elements,n_dims,entropy_bits,header_bits,total_bits\n")
        for e in self.entries:
            buf.write(f"{e.name},{e.num_elements},{e.num_dims},"
                      f"{e.entropy_bits!r},{e.header_bits},{e.total_bits!r}\n")
        return buf.getvalue()


def payload_estimate(name: str, values: np.ndarray,
                     q_bits: int = 8) -> PayloadEntry:
    """Idealized per-tensor bit cost: uniform quantization to q_bits levels,
    Shannon bound on the level histogram, plus a small header carrying
    (min, max), q_bits, and the shape (32 bits per dimension).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size < 1:
        raise ValueError("payload estimate needs at least one element")
    n = values.size
    d = values.ndim
    levels = 1 << q_bits
    x_min = float(values.min())
    x_max = float(values.max())
    if x_max > x_min:
        scale = (x_max - x_min) / (levels - 1)
        q = np.clip(np.rint((values - x_min) / scale), 0, levels - 1)
        counts = np.bincount(q.astype(np.int64).ravel(), minlength=levels)
        p = counts[counts > 0] / n
        entropy_bits = float(n * np.sum(-p * np.log2(p)))
    else:
        # Constant tensor: a single occupied level carries zero bits.
        entropy_bits = 0.0
    header_bits = 2 * 32 + 8 + 32 * d
    return PayloadEntry(name, n, d, entropy_bits, header_bits)


# ---------------------------------------------------------------------------
# rate-distortion curves and BD-rate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RDPoint:
    bitrate: float  # bits (or bits/s at a fixed FPS)
    quality: float  # PSNR dB

    def __post_init__(self):
        if not self.bitrate > 0:
            raise ValueError("RD point needs a positive bitrate")
        if not np.isfinite(self.quality):
            raise ValueError("RD point quality must be finite")


@dataclass
class RDCurve:
    points: list[RDPoint]

    def __post_init__(self):
        rates = [p.bitrate for p in self.points]
        if any(b >= a for a, b in zip(rates[1:], rates[:-1])):
            raise ValueError("RD curve bitrates must be strictly increasing")

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.bitrate for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points])


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average bitrate difference (percent) of test vs anchor at equal quality.

    Classic Bjontegaard computation: fit quality -> log(rate) with a cubic
    polynomial per curve, integrate the log-rate gap over the overlapping
    quality interval. Negative means the test curve needs fewer bits.
    """
    for curve in (anchor, test):
        if len(curve.points) < 4:
            raise ValueError("BD-rate needs at least 4 points per curve")
    lo = max(anchor.qualities.min(), test.qualities.min())
    hi = min(anchor.qualities.max(), test.qualities.max())
    if hi <= lo:
        raise ValueError("RD curves have no overlapping quality range")
    poly_a = np.polyfit(anchor.qualities, np.log(anchor.rates), 3)
    poly_t = np.polyfit(test.qualities, np.log(test.rates), 3)
    int_a = np.polyval(np.polyint(poly_a), hi) - np.polyval(np.polyint(poly_a), lo)
    int_t = np.polyval(np.polyint(poly_t), hi) - np.polyval(np.polyint(poly_t), lo)
    avg_gap = (int_t - int_a) / (hi - lo)
    return float((np.exp(avg_gap) - 1.0) * 100.0)
