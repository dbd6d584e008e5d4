"""Per-run cache of decoded planes and density.

The codec round trip is expensive, so decoded tensors are reused across
training steps and refreshed only when (a) a fixed number of steps has
elapsed, or (b) the raw parameters have drifted too far from the snapshots
taken at the last refresh.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import quantpack as qp
from . import surrogate as sg
from .codec import CodecConfig, round_trip
from .field import DensityGrid, FeaturePlanes

DRIFT_DELTA = 1e-8

PLANE_KEYS = ("xy", "xz", "yz")
REASON_INITIAL = "initial"
REASON_INTERVAL = "interval"
REASON_DRIFT = "drift"


@dataclass(frozen=True)
class QuantConfig:
    """Quantization choices carried by the training config."""

    scheme: str = "absmax"  # absmax | channelwise
    appearance_bounds: tuple[float, float] = (-5.0, 5.0)
    density_bounds: tuple[float, float] = (-25.0, 25.0)
    min_range: float = qp.DEFAULT_MIN_RANGE

    def spec_for(self, values: np.ndarray, is_density: bool) -> qp.QuantSpec:
        if self.scheme == "absmax":
            lo, hi = self.density_bounds if is_density else self.appearance_bounds
            return qp.QuantSpec("absmax", lo, hi)
        if self.scheme == "channelwise":
            # Bounds are re-estimated at every cache refresh and counted as
            # transmitted side information.
            return qp.estimate_channelwise_bounds(values, self.min_range)
        raise ValueError(f"unknown quantization scheme: {self.scheme}")


@dataclass(frozen=True)
class CodecPipeline:
    """Everything a refresh needs: quantization, packing, and the codec."""

    quant: QuantConfig = QuantConfig()
    pack_kind: str = qp.FLATTEN_GRAY
    codec: CodecConfig = CodecConfig()
    density_codec: Optional[CodecConfig] = None  # defaults to `codec`
    surrogate: sg.SurrogateKind = sg.SurrogateKind()
    spsa_seed: int = 0

    @property
    def density_cfg(self) -> CodecConfig:
        return self.density_codec or self.codec


@dataclass
class CacheState:
    decoded: dict[str, np.ndarray] = field(default_factory=dict)
    snapshots: dict[str, np.ndarray] = field(default_factory=dict)
    sensitivities: dict[str, np.ndarray] = field(default_factory=dict)
    side_info_bits: int = 0
    g_cache: int = -1
    bits: int = 0
    refresh_count: int = 0
    last_reason: str = ""

    @property
    def empty(self) -> bool:
        return not self.decoded


def compute_drift(current: np.ndarray, snapshot: np.ndarray) -> float:
    """Normalized l2 difference between a tensor and its cached snapshot."""
    current = np.asarray(current, dtype=np.float64)
    snapshot = np.asarray(snapshot, dtype=np.float64)
    if current.shape != snapshot.shape:
        raise ValueError("drift requires matching shapes")
    num = np.linalg.norm((current - snapshot).ravel())
    return float(num / (np.linalg.norm(snapshot.ravel()) + DRIFT_DELTA))


def _tensors(planes: FeaturePlanes, grid: DensityGrid) -> dict[str, np.ndarray]:
    return {"xy": planes.p_xy.data, "xz": planes.p_xz.data,
            "yz": planes.p_yz.data, "density": grid.d.data}


def max_drift(state: CacheState, planes: FeaturePlanes,
              grid: DensityGrid) -> float:
    return max(compute_drift(cur, state.snapshots[key])
               for key, cur in _tensors(planes, grid).items())


def refresh_reason(state: CacheState, g: int, interval: int,
                   drift_threshold: float, planes: FeaturePlanes,
                   grid: DensityGrid) -> Optional[str]:
    if state.empty:
        return REASON_INITIAL
    if g - state.g_cache >= interval:
        return REASON_INTERVAL
    if max_drift(state, planes, grid) > drift_threshold:
        return REASON_DRIFT
    return None


def should_refresh(state: CacheState, g: int, interval: int,
                   drift_threshold: float, planes: FeaturePlanes,
                   grid: DensityGrid) -> bool:
    """True iff the cache is empty, the step budget is spent, or any tensor
    drifted past the threshold."""
    return refresh_reason(state, g, interval, drift_threshold,
                          planes, grid) is not None


def _spsa_plane_sensitivity(x01: np.ndarray, layout: qp.PackLayout,
                            cfg: CodecConfig, kind: sg.SurrogateKind,
                            rng: np.random.Generator) -> np.ndarray:
    """SPSA sensitivity estimated in canvas space and unpacked back to the
    raw tensor shape. Packing is a bijection and quantization is affine, so
    the diagonal transfers elementwise."""

    def canvas_map(values: np.ndarray) -> np.ndarray:
        safe = np.clip(values, 0.0, 1.0)
        return round_trip(qp.Canvas(safe), cfg).decoded.values

    canvas = qp.pack_values(x01, layout)
    sens = sg.spsa_diag_jacobian(canvas_map, canvas, kind.spsa_eps,
                                 rng=rng, draws=kind.spsa_draws)
    return qp.unpack_values(sens, layout)


def refresh(state: CacheState, planes: FeaturePlanes, grid: DensityGrid,
            pipeline: CodecPipeline, g: int,
            reason: str = REASON_INTERVAL) -> CacheState:
    """Run quantize -> pack -> codec round trip -> unpack -> dequantize for
    every plane (tile/untile for density) and snapshot the raw tensors."""
    decoded: dict[str, np.ndarray] = {}
    snapshots: dict[str, np.ndarray] = {}
    sensitivities: dict[str, np.ndarray] = {}
    total_bits = 0
    side_bits = 0
    rng = np.random.default_rng([pipeline.spsa_seed, g])
    want_spsa = pipeline.surrogate.kind == sg.STE_SPSA

    for key, raw in _tensors(planes, grid).items():
        is_density = key == "density"
        cfg = pipeline.density_cfg if is_density else pipeline.codec
        spec = pipeline.quant.spec_for(raw, is_density)
        kind = qp.DENSITY_MONO if is_density else pipeline.pack_kind
        layout = qp.layout_for(kind, raw.shape)
        x01 = qp.quantize(raw, spec)
        result = round_trip(qp.pack(x01, layout), cfg)
        decoded[key] = qp.dequantize(qp.unpack(result.decoded, layout), spec)
        snapshots[key] = raw.copy()
        total_bits += result.bits
        side_bits += spec.side_info_bits()
        if want_spsa:
            sensitivities[key] = _spsa_plane_sensitivity(
                x01, layout, cfg, pipeline.surrogate, rng)

    return CacheState(decoded=decoded, snapshots=snapshots,
                      sensitivities=sensitivities, side_info_bits=side_bits,
                      g_cache=g, bits=total_bits,
                      refresh_count=state.refresh_count + 1,
                      last_reason=reason)
