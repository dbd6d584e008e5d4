"""Synthetic desk-scale scenes: analytic Gaussian blobs rendered by dense
quadrature to produce ground-truth images.

The oracle renderer here is written in plain numpy, independent of the
autodiff-based renderer in ``field``, so the two can cross-check each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import CameraPose, camera_rays, look_at_pose, ray_box_bounds, sample_ts

FOV_DEG = 55.0
QUADRATURE_FACTOR = 4  # oracle sample density relative to training rays


@dataclass(frozen=True)
class GaussianBlob:
    center: tuple[float, float, float]
    radius: float
    peak: float
    color: tuple[float, float, float]

    def __post_init__(self):
        if max(abs(c) for c in self.center) > 1.0:
            raise ValueError("blob centers must lie inside [-1, 1]^3")
        if self.radius <= 0 or self.peak < 0:
            raise ValueError("blob radius must be positive and peak >= 0")


@dataclass(frozen=True)
class SceneSpec:
    blobs: tuple[GaussianBlob, ...] = ()
    num_cameras: int = 10
    holdout_cameras: int = 2
    camera_radius: float = 3.0
    elevation_deg: float = 25.0
    image_size: int = 64
    samples_per_ray: int = 48

    def __post_init__(self):
        if self.num_cameras - self.holdout_cameras < 4:
            raise ValueError("need at least 4 training poses")
        if self.holdout_cameras < 2:
            raise ValueError("need at least 2 held-out poses")


@dataclass
class SceneData:
    spec: SceneSpec
    train_poses: list[CameraPose]
    train_images: np.ndarray    # [N_train, 3, H, W]
    holdout_poses: list[CameraPose]
    holdout_images: np.ndarray  # [N_holdout, 3, H, W]


def default_scene() -> SceneSpec:
    return SceneSpec(blobs=(
        GaussianBlob((0.0, 0.0, 0.1), 0.45, 9.0, (0.9, 0.35, 0.2)),
        GaussianBlob((-0.45, 0.4, -0.25), 0.3, 7.0, (0.25, 0.8, 0.4)),
        GaussianBlob((0.5, -0.4, -0.15), 0.35, 8.0, (0.3, 0.4, 0.95)),
    ))


def ring_poses(spec: SceneSpec) -> list[CameraPose]:
    """Evenly spaced cameras on a ring, all looking at the origin."""
    el = np.radians(spec.elevation_deg)
    poses = []
    for i in range(spec.num_cameras):
        theta = 2.0 * np.pi * i / spec.num_cameras
        pos = spec.camera_radius * np.array([
            np.cos(theta) * np.cos(el),
            np.sin(theta) * np.cos(el),
            np.sin(el),
        ])
        poses.append(look_at_pose(pos, (0.0, 0.0, 0.0),
                                  spec.image_size, spec.image_size,
                                  fov_deg=FOV_DEG))
    return poses


def split_indices(spec: SceneSpec) -> tuple[list[int], list[int]]:
    """Deterministic train/holdout split with holdouts spread over the ring."""
    holdout = set(np.linspace(0, spec.num_cameras, spec.holdout_cameras,
                              endpoint=False, dtype=int) + 1)
    holdout = {int(i) % spec.num_cameras for i in holdout}
    while len(holdout) < spec.holdout_cameras:  # collisions on tiny rings
        holdout.add(max(holdout) + 1)
    train = [i for i in range(spec.num_cameras) if i not in holdout]
    return train, sorted(holdout)


def analytic_density(spec: SceneSpec, pts: np.ndarray) -> np.ndarray:
    """sigma_gt(x) = sum_b peak_b * exp(-|x - c_b|^2 / r_b^2)."""
    pts = np.atleast_2d(pts)
    sigma = np.zeros(pts.shape[0])
    for b in spec.blobs:
        d2 = np.sum((pts - np.asarray(b.center)) ** 2, axis=1)
        sigma += b.peak * np.exp(-d2 / (b.radius ** 2))
    return sigma


def analytic_color(spec: SceneSpec, pts: np.ndarray) -> np.ndarray:
    """Density-weighted mix of the per-blob constant colors."""
    pts = np.atleast_2d(pts)
    num = np.zeros((pts.shape[0], 3))
    den = np.zeros(pts.shape[0])
    for b in spec.blobs:
        d2 = np.sum((pts - np.asarray(b.center)) ** 2, axis=1)
        w = b.peak * np.exp(-d2 / (b.radius ** 2))
        num += w[:, None] * np.asarray(b.color)
        den += w
    return num / (den[:, None] + 1e-12)


def oracle_render_rays(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray,
                       samples_per_ray: int) -> np.ndarray:
    """Quadrature alpha compositing of the analytic field, plain numpy."""
    near, far = ray_box_bounds(origins, dirs)
    t_vals, deltas = sample_ts(near, far, samples_per_ray, 0.5)
    r, k = t_vals.shape
    pts = (origins[:, None, :] + t_vals[:, :, None] * dirs[:, None, :])
    flat = pts.reshape(r * k, 3)
    sigma = analytic_density(spec, flat).reshape(r, k)
    color = analytic_color(spec, flat).reshape(r, k, 3)
    sd = sigma * deltas
    accum = np.cumsum(sd, axis=1)
    trans = np.exp(-(np.concatenate([np.zeros((r, 1)), accum[:, :-1]], axis=1)))
    weights = trans * (1.0 - np.exp(-sd))
    return np.sum(weights[:, :, None] * color, axis=1)


def oracle_render_image(spec: SceneSpec, pose: CameraPose,
                        samples_per_ray: int) -> np.ndarray:
    origins, dirs = camera_rays(pose)
    rgb = oracle_render_rays(spec, origins, dirs, samples_per_ray)
    return rgb.T.reshape(3, pose.height, pose.width)


def generate_scene(spec: SceneSpec) -> SceneData:
    """Ground-truth images for every pose by dense quadrature (4x the
    training sample count along each ray)."""
    poses = ring_poses(spec)
    train_idx, holdout_idx = split_indices(spec)
    quad = QUADRATURE_FACTOR * spec.samples_per_ray
    images = [oracle_render_image(spec, poses[i], quad)
              for i in range(spec.num_cameras)]
    return SceneData(
        spec=spec,
        train_poses=[poses[i] for i in train_idx],
        train_images=np.stack([images[i] for i in train_idx]),
        holdout_poses=[poses[i] for i in holdout_idx],
        holdout_images=np.stack([images[i] for i in holdout_idx]),
    )
