"""Losses, optimizer, the codec-in-the-loop training step, the two-stage
pretrain/finetune pipeline, and gradient diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import cache as cache_mod
from . import surrogate as sg
from .autodiff import Tape, Tensor
from .cache import CacheState, CodecPipeline, QuantConfig
from .codec import CodecConfig
from .field import (DensityGrid, FeaturePlanes, Field, camera_rays,
                    field_query, ray_box_bounds, render_image, render_rays,
                    sample_ts)
from .metrics import psnr
from .quantpack import FLATTEN_GRAY
from .scene import SceneData
from .surrogate import SurrogateContext, SurrogateKind

GRAD_SAMPLE_SIZE = 200_000  # entries sampled for the p99 |grad| diagnostic


@dataclass(frozen=True)
class TrainConfig:
    lambda_rec: float = 1.0
    lambda_tv: float = 5e-5
    lr_field: float = 0.02
    lr_mlp: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    pretrain_steps: int = 2000
    finetune_steps: int = 300
    rays_per_batch: int = 1024
    cache_interval: int = 128     # M, step-based refresh
    drift_threshold: float = 0.05
    surrogate: SurrogateKind = SurrogateKind()
    quant: QuantConfig = QuantConfig()
    pack_kind: str = FLATTEN_GRAY
    codec: CodecConfig = CodecConfig()
    density_codec: Optional[CodecConfig] = None
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_rec", "lambda_tv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("pretrain_steps", "finetune_steps", "rays_per_batch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")

    def pipeline(self) -> CodecPipeline:
        return CodecPipeline(quant=self.quant, pack_kind=self.pack_kind,
                             codec=self.codec, density_codec=self.density_codec,
                             surrogate=self.surrogate, spsa_seed=self.seed)


@dataclass
class DiagnosticsRecord:
    step: int
    mse: float
    grad_l2: float
    grad_over_param: float
    grad_p99: float
    refreshed: str  # "" when cached, else the refresh trigger reason
    bits: int       # bits at the last refresh (0 before any)

    def __post_init__(self):
        for name in ("mse", "grad_l2", "grad_over_param", "grad_p99"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite diagnostic {name} at step {self.step}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def tv_loss(planes: FeaturePlanes, grid: DensityGrid) -> Tensor:
    """Mean squared adjacent difference per tensor, summed over the three
    planes and the density grid."""
    loss = None
    for t, spatial in ((planes.p_xy, (1, 2)), (planes.p_xz, (1, 2)),
                       (planes.p_yz, (1, 2)), (grid.d, (0, 1, 2))):
        total = None
        count = 0
        for axis in spatial:
            d = ad.sum_(ad.square(ad.axis_diff(t, axis)))
            count += t.data.size // t.data.shape[axis] * (t.data.shape[axis] - 1)
            total = d if total is None else total + d
        term = total * (1.0 / count)
        loss = term if loss is None else loss + term
    return loss


def reconstruction_loss(rendered: Tensor, target) -> Tensor:
    """Mean absolute error over pixels and channels."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if rendered.data.shape != tgt.shape:
        raise ValueError(
            f"shape mismatch: {rendered.data.shape} vs {tgt.shape}")
    return ad.mean(ad.abs_(rendered - Tensor(tgt)))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_update(params: list[Tensor], grads: list[Optional[np.ndarray]],
                state: AdamState, lr: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard Adam with bias correction, updating params in place.

    A missing gradient counts as zero (moments still decay)."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError("gradient shape does not match parameter")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# ray batches
# ---------------------------------------------------------------------------

@dataclass
class RayBank:
    """All training rays of a scene, flattened across views."""

    origins: np.ndarray
    dirs: np.ndarray
    targets: np.ndarray  # [N, 3]
    near: np.ndarray
    far: np.ndarray

    @classmethod
    def from_scene(cls, scene: SceneData) -> "RayBank":
        origins, dirs, targets = [], [], []
        for pose, image in zip(scene.train_poses, scene.train_images):
            o, d = camera_rays(pose)
            origins.append(o)
            dirs.append(d)
            targets.append(image.reshape(3, -1).T)
        origins = np.concatenate(origins)
        dirs = np.concatenate(dirs)
        near, far = ray_box_bounds(origins, dirs)
        return cls(origins, dirs, np.concatenate(targets), near, far)

    def batch(self, rng: np.random.Generator, batch_size: int, k: int):
        idx = rng.integers(0, self.origins.shape[0], size=batch_size)
        offsets = rng.random((batch_size, k))
        t_vals, deltas = sample_ts(self.near[idx], self.far[idx], k, offsets)
        return (self.origins[idx], self.dirs[idx], t_vals, deltas,
                self.targets[idx])


def _step_rng(seed: int, step: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, salt, step])


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    field: Field
    opt_field: AdamState
    opt_mlp: AdamState
    cache: CacheState

    @classmethod
    def fresh(cls, fld: Field) -> "TrainState":
        return cls(field=fld,
                   opt_field=AdamState.for_params(
                       [t for _, t in fld.field_parameters()]),
                   opt_mlp=AdamState.for_params(
                       [t for _, t in fld.mlp_parameters()]),
                   cache=CacheState())


def _grad_diagnostics(planes: FeaturePlanes, rng: np.random.Generator,
                      eps: float = 1e-12) -> tuple[float, float, float]:
    """l2 norm, scale-normalized magnitude, and sampled p99 of the
    feature-plane gradients."""
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
             for _, p in planes.named()]
    flat_g = np.concatenate([g.ravel() for g in grads])
    flat_p = np.concatenate([p.data.ravel() for _, p in planes.named()])
    l2 = float(np.linalg.norm(flat_g))
    ratio = l2 / (float(np.linalg.norm(flat_p)) + eps)
    if flat_g.size > GRAD_SAMPLE_SIZE:
        sample = flat_g[rng.integers(0, flat_g.size, size=GRAD_SAMPLE_SIZE)]
    else:
        sample = flat_g
    p99 = float(np.percentile(np.abs(sample), 99))
    return l2, ratio, p99


def _apply_loss_and_update(state: TrainState, cfg: TrainConfig,
                           batch, step: int, make_forward,
                           refreshed: str, bits: int) -> tuple[float, DiagnosticsRecord]:
    origins, dirs, t_vals, deltas, targets = batch
    fld = state.field
    for _, p in fld.parameters():
        p.zero_grad()
    with Tape() as tape:
        # The surrogate overrides must be recorded on this tape, so the
        # forward tensors are built inside the context.
        planes_fwd, grid_fwd = make_forward()
        rendered, _ = render_rays(field_query(planes_fwd, grid_fwd, fld.mlp),
                                  origins, dirs, t_vals, deltas)
        l_rec = reconstruction_loss(rendered, targets)
        # TV acts on the raw pre-codec tensors, never the decoded ones.
        loss = cfg.lambda_rec * l_rec + cfg.lambda_tv * tv_loss(fld.planes,
                                                                fld.grid)
        if not math.isfinite(float(loss.data)):
            raise FloatingPointError(f"non-finite loss at step {step}")
        tape.backward(loss)

    mse = float(np.mean((rendered.data - targets) ** 2))
    l2, ratio, p99 = _grad_diagnostics(fld.planes,
                                       _step_rng(cfg.seed, step, salt=2))
    field_params = [t for _, t in fld.field_parameters()]
    adam_update(field_params, [t.grad for t in field_params], state.opt_field,
                cfg.lr_field, cfg.beta1, cfg.beta2, cfg.adam_eps)
    mlp_params = [t for _, t in fld.mlp_parameters()]
    adam_update(mlp_params, [t.grad for t in mlp_params], state.opt_mlp,
                cfg.lr_mlp, cfg.beta1, cfg.beta2, cfg.adam_eps)
    record = DiagnosticsRecord(step, mse, l2, ratio, p99, refreshed, bits)
    return float(loss.data), record


def vanilla_step(state: TrainState, cfg: TrainConfig, batch,
                 step: int) -> tuple[float, DiagnosticsRecord]:
    """One training step with no codec in the loop (P_tilde = P)."""
    return _apply_loss_and_update(
        state, cfg, batch, step,
        lambda: (state.field.planes, state.field.grid),
        refreshed="", bits=0)


def scl_step(state: TrainState, cfg: TrainConfig, batch,
             step: int) -> tuple[float, DiagnosticsRecord]:
    """One standard-codec-in-the-loop step: refresh the decoded cache if
    needed, build the surrogate overrides, render, and update."""
    fld = state.field
    pipeline = cfg.pipeline()
    reason = cache_mod.refresh_reason(state.cache, step, cfg.cache_interval,
                                      cfg.drift_threshold, fld.planes, fld.grid)
    if reason is not None:
        state.cache = cache_mod.refresh(state.cache, fld.planes, fld.grid,
                                        pipeline, step, reason)
    refreshed = reason or ""

    def override(raw: Tensor, key: str) -> Tensor:
        ctx = SurrogateContext(
            is_refresh_step=reason is not None,
            sensitivity=state.cache.sensitivities.get(key))
        return sg.apply_surrogate(cfg.surrogate, raw, state.cache.decoded[key],
                                  ctx)

    def make_forward():
        planes_fwd = FeaturePlanes(override(fld.planes.p_xy, "xy"),
                                   override(fld.planes.p_xz, "xz"),
                                   override(fld.planes.p_yz, "yz"))
        grid_fwd = DensityGrid(override(fld.grid.d, "density"))
        return planes_fwd, grid_fwd

    return _apply_loss_and_update(state, cfg, batch, step, make_forward,
                                  refreshed, state.cache.bits)


# ---------------------------------------------------------------------------
# stage drivers
# ---------------------------------------------------------------------------

def pretrain_vanilla(fld: Field, scene: SceneData,
                     cfg: TrainConfig) -> list[DiagnosticsRecord]:
    """Stage 1: train the vanilla backbone (no codec, no cache)."""
    bank = RayBank.from_scene(scene)
    state = TrainState.fresh(fld)
    records = []
    for step in range(cfg.pretrain_steps):
        batch = bank.batch(_step_rng(cfg.seed, step, salt=1),
                           cfg.rays_per_batch, scene.spec.samples_per_ray)
        _, rec = vanilla_step(state, cfg, batch, step)
        records.append(rec)
    return records


@dataclass
class SCLResult:
    bits_total: int          # codec payload + quant side info at the final refresh
    psnr_decoded: float      # held-out PSNR rendered from decoded tensors only
    diagnostics: list[DiagnosticsRecord]
    decoded: dict[str, np.ndarray]


def finetune_scl(fld: Field, scene: SceneData, cfg: TrainConfig) -> SCLResult:
    """Stage 2: finetune through the codec round trip, then evaluate the
    decoded model exactly as a client would receive it."""
    bank = RayBank.from_scene(scene)
    state = TrainState.fresh(fld)
    records = []
    for step in range(cfg.finetune_steps):
        batch = bank.batch(_step_rng(cfg.seed, step, salt=3),
                           cfg.rays_per_batch, scene.spec.samples_per_ray)
        _, rec = scl_step(state, cfg, batch, step)
        records.append(rec)
    # The client decodes the final parameters, so run one last round trip
    # on them and evaluate from the decoded tensors alone.
    final = cache_mod.refresh(state.cache, fld.planes, fld.grid,
                              cfg.pipeline(), cfg.finetune_steps)
    quality = evaluate_decoded(final.decoded, fld.mlp, scene)
    bits_total = final.bits + final.side_info_bits
    return SCLResult(bits_total, quality, records, final.decoded)


def compress_once(fld: Field, scene: SceneData, cfg: TrainConfig) -> SCLResult:
    """Compress a trained field once and evaluate the decoded model."""
    final = cache_mod.refresh(CacheState(), fld.planes, fld.grid,
                              cfg.pipeline(), 0)
    quality = evaluate_decoded(final.decoded, fld.mlp, scene)
    return SCLResult(final.bits + final.side_info_bits, quality, [],
                     final.decoded)


def finetune_ca(fld: Field, scene: SceneData, cfg: TrainConfig) -> SCLResult:
    """Codec-agnostic arm of the A/B comparison: the same optimization
    budget and ray batches as ``finetune_scl``, but trained without any
    codec exposure, then compressed once at the end."""
    bank = RayBank.from_scene(scene)
    state = TrainState.fresh(fld)
    records = []
    for step in range(cfg.finetune_steps):
        batch = bank.batch(_step_rng(cfg.seed, step, salt=3),
                           cfg.rays_per_batch, scene.spec.samples_per_ray)
        _, rec = vanilla_step(state, cfg, batch, step)
        records.append(rec)
    result = compress_once(fld, scene, cfg)
    return SCLResult(result.bits_total, result.psnr_decoded, records,
                     result.decoded)


def evaluate_decoded(decoded: dict[str, np.ndarray], mlp, scene: SceneData,
                     samples_per_ray: Optional[int] = None) -> float:
    """Mean held-out PSNR rendered from decoded tensors only.

    Takes plain arrays (not the live field), so raw pre-codec parameters
    cannot leak into evaluation by construction.
    """
    planes = FeaturePlanes(Tensor(decoded["xy"].copy()),
                           Tensor(decoded["xz"].copy()),
                           Tensor(decoded["yz"].copy()))
    grid = DensityGrid(Tensor(decoded["density"].copy()))
    k = samples_per_ray or scene.spec.samples_per_ray
    scores = []
    for pose, target in zip(scene.holdout_poses, scene.holdout_images):
        img = render_image(planes, grid, mlp, pose, k)
        scores.append(psnr(img, target))
    return float(np.mean(scores))


def evaluate_raw(fld: Field, scene: SceneData,
                 samples_per_ray: Optional[int] = None,
                 holdout: bool = True) -> float:
    """PSNR of the live (uncompressed) field, train or held-out views."""
    k = samples_per_ray or scene.spec.samples_per_ray
    poses = scene.holdout_poses if holdout else scene.train_poses
    images = scene.holdout_images if holdout else scene.train_images
    scores = []
    for pose, target in zip(poses, images):
        img = render_image(fld.planes, fld.grid, fld.mlp, pose, k)
        scores.append(psnr(img, target))
    return float(np.mean(scores))
