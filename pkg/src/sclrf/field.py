"""Plane-factorized radiance field: tri-plane features, a density grid,
an MLP decoder, and alpha-composited volume rendering.

Scene coordinates are normalized to [-1, 1]^3. A 3D point x = (x, y, z)
projects onto the planes as u = (x, y), v = (x, z), w = (y, z); the first
projection coordinate indexes plane rows, the second columns. Samples
outside the box clamp to the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FAR_EPS = 1e-9


@dataclass
class FeaturePlanes:
    """Three axis-aligned feature planes, each [C, H, W] with shared C."""

    p_xy: Tensor
    p_xz: Tensor
    p_yz: Tensor

    def __post_init__(self):
        chans = {p.shape[0] for p in (self.p_xy, self.p_xz, self.p_yz)}
        if len(chans) != 1:
            raise ValueError("all feature planes must share the channel count")
        for p in (self.p_xy, self.p_xz, self.p_yz):
            if p.data.ndim != 3 or p.shape[1] < 2 or p.shape[2] < 2:
                raise ValueError("planes must be [C, H>=2, W>=2]")

    @property
    def channels(self) -> int:
        return self.p_xy.shape[0]

    def named(self) -> list[tuple[str, Tensor]]:
        return [("plane_xy", self.p_xy), ("plane_xz", self.p_xz),
                ("plane_yz", self.p_yz)]


@dataclass
class DensityGrid:
    """Raw pre-activation density volume, [Dy, Dx, Dz]."""

    d: Tensor

    def __post_init__(self):
        if self.d.data.ndim != 3 or min(self.d.shape) < 2:
            raise ValueError("density grid must be [Dy>=2, Dx>=2, Dz>=2]")


class RendererMLP:
    """Two relu hidden layers, a density head, and a sigmoid color head.

    Input width is 3*C (concatenated tri-plane features) + 1 (density
    feature) + 3 (view direction).
    """

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        in_width = 3 * channels + 4
        self.channels = channels
        self.hidden = hidden

        def glorot(n_in, n_out, gain):
            w = rng.standard_normal((n_in, n_out)) * gain * math.sqrt(2.0 / n_in)
            return Tensor(w, requires_grad=True)

        self.w1 = glorot(in_width, hidden, 1.0)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = glorot(hidden, hidden, 1.0)
        self.b2 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w_sigma = glorot(hidden, 1, 0.5)
        self.b_sigma = Tensor(np.zeros(1), requires_grad=True)
        self.w_color = glorot(hidden, 3, 0.5)
        self.b_color = Tensor(np.zeros(3), requires_grad=True)

    def named(self) -> list[tuple[str, Tensor]]:
        return [("mlp_w1", self.w1), ("mlp_b1", self.b1),
                ("mlp_w2", self.w2), ("mlp_b2", self.b2),
                ("mlp_w_sigma", self.w_sigma), ("mlp_b_sigma", self.b_sigma),
                ("mlp_w_color", self.w_color), ("mlp_b_color", self.b_color)]


@dataclass
class Ray:
    """A camera ray with its fixed sample positions along the direction."""

    origin: np.ndarray       # [3]
    direction: np.ndarray    # unit [3]
    t_vals: np.ndarray       # strictly increasing [K]
    deltas: np.ndarray       # [K]; last spacing is a fixed far-plane pad

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        self.t_vals = np.asarray(self.t_vals, dtype=np.float64)
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be a unit vector")
        if self.t_vals.size < 1:
            raise ValueError("ray needs at least one sample")
        if np.any(np.diff(self.t_vals) <= 0):
            raise ValueError("ray samples must be strictly increasing")
        if np.any(self.deltas <= 0):
            raise ValueError("ray spacings must be positive")


@dataclass
class CameraPose:
    c2w: np.ndarray  # camera-to-world [3, 4]
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (3, 4):
            raise ValueError("camera-to-world must be 3x4")
        r = self.c2w[:, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise ValueError("rotation block must be orthonormal")


# ---------------------------------------------------------------------------
# differentiable grid sampling
# ---------------------------------------------------------------------------

def _cell_coords(v: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map [-1, 1] coordinates to (cell index, fraction, interior mask)."""
    clamped = np.clip(v, -1.0, 1.0)
    g = (clamped + 1.0) * 0.5 * (n - 1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, n - 2)
    return i0, g - i0, (v > -1.0) & (v < 1.0)


def bilinear_sample(plane: Tensor, uv) -> Tensor:
    """Bilinearly sample a [C, H, W] plane at [N, 2] coordinates in [-1, 1].

    Differentiable with respect to both the plane and the coordinates.
    Returns [N, C].
    """
    uv_t = uv if isinstance(uv, Tensor) else None
    coords = np.atleast_2d(uv.data if uv_t is not None else np.asarray(uv, float))
    c, h, w = plane.shape
    i0, fi, mi = _cell_coords(coords[:, 0], h)
    j0, fj, mj = _cell_coords(coords[:, 1], w)
    flat = plane.data.reshape(c, h * w)
    idx00 = i0 * w + j0
    idx01 = idx00 + 1
    idx10 = idx00 + w
    idx11 = idx10 + 1
    w00 = (1 - fi) * (1 - fj)
    w01 = (1 - fi) * fj
    w10 = fi * (1 - fj)
    w11 = fi * fj
    acc = flat[:, idx00] * w00[None, :]  # [C, N]
    acc += flat[:, idx01] * w01[None, :]
    acc += flat[:, idx10] * w10[None, :]
    acc += flat[:, idx11] * w11[None, :]
    out = np.ascontiguousarray(acc.T)  # [N, C]

    def backward(gout):
        g_plane = None
        if plane.requires_grad:
            g_flat = np.zeros(c * h * w)
            offs = (np.arange(c) * (h * w))[:, None]
            gt = np.ascontiguousarray(gout.T)  # [C, N]
            for idx, wgt in ((idx00, w00), (idx01, w01),
                             (idx10, w10), (idx11, w11)):
                g_flat += np.bincount((offs + idx[None, :]).ravel(),
                                      weights=(gt * wgt[None, :]).ravel(),
                                      minlength=c * h * w)
            g_plane = g_flat.reshape(c, h, w)
        g_uv = None
        if uv_t is not None and uv_t.requires_grad:
            v00, v01 = flat[:, idx00], flat[:, idx01]
            v10, v11 = flat[:, idx10], flat[:, idx11]
            d_fi = ((v10 - v00) * (1 - fj) + (v11 - v01) * fj).T
            d_fj = ((v01 - v00) * (1 - fi) + (v11 - v10) * fi).T
            gi = np.sum(gout * d_fi, axis=1) * (0.5 * (h - 1)) * mi
            gj = np.sum(gout * d_fj, axis=1) * (0.5 * (w - 1)) * mj
            g_uv = np.stack([gi, gj], axis=1).reshape(uv_t.data.shape)
        return (g_plane, g_uv)

    return ad.make_op(out, (plane, uv_t), backward)


def trilinear_sample(grid: Tensor, xyz) -> Tensor:
    """Trilinearly sample a [Dy, Dx, Dz] grid at [N, 3] scene coordinates.

    Grid axes store (y, x, z) in that order. Returns [N].
    """
    xyz_t = xyz if isinstance(xyz, Tensor) else None
    pts = np.atleast_2d(xyz.data if xyz_t is not None else np.asarray(xyz, float))
    dy, dx, dz = grid.shape
    # axis order: y -> rows, x -> middle, z -> last
    a0, fa, ma = _cell_coords(pts[:, 1], dy)
    b0, fb, mb = _cell_coords(pts[:, 0], dx)
    c0, fc, mc = _cell_coords(pts[:, 2], dz)
    flat = grid.data.ravel()
    sy, sx = dx * dz, dz
    base = a0 * sy + b0 * sx + c0
    corners = []
    for da in (0, 1):
        for db in (0, 1):
            for dc in (0, 1):
                idx = base + da * sy + db * sx + dc
                wa = fa if da else (1 - fa)
                wb = fb if db else (1 - fb)
                wc = fc if dc else (1 - fc)
                corners.append((idx, wa * wb * wc, (da, db, dc)))
    out = np.zeros(pts.shape[0])
    for idx, wgt, _ in corners:
        out += flat[idx] * wgt

    def backward(gout):
        g_grid = None
        if grid.requires_grad:
            g_flat = np.zeros(flat.size)
            for idx, wgt, _ in corners:
                g_flat += np.bincount(idx, weights=gout * wgt,
                                      minlength=flat.size)
            g_grid = g_flat.reshape(dy, dx, dz)
        g_xyz = None
        if xyz_t is not None and xyz_t.requires_grad:
            ga = np.zeros_like(fa)
            gb = np.zeros_like(fb)
            gc = np.zeros_like(fc)
            for idx, _, (da, db, dc) in corners:
                v = flat[idx]
                wa = fa if da else (1 - fa)
                wb = fb if db else (1 - fb)
                wc = fc if dc else (1 - fc)
                sa = 1.0 if da else -1.0
                sb = 1.0 if db else -1.0
                sc = 1.0 if dc else -1.0
                ga += v * sa * wb * wc
                gb += v * wa * sb * wc
                gc += v * wa * wb * sc
            gx = gout * gb * (0.5 * (dx - 1)) * mb
            gy = gout * ga * (0.5 * (dy - 1)) * ma
            gz = gout * gc * (0.5 * (dz - 1)) * mc
            g_xyz = np.stack([gx, gy, gz], axis=1).reshape(xyz_t.data.shape)
        return (g_grid, g_xyz)

    return ad.make_op(out, (grid, xyz_t), backward)


def sample_triplane(planes: FeaturePlanes, x) -> Tensor:
    """Tri-plane feature at x: concatenated bilinear samples of the three
    projections. Accepts [3] or [N, 3]; returns [3C] or [N, 3C]."""
    raw = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    single = raw.ndim == 1
    if isinstance(x, Tensor) and x.requires_grad:
        pts2 = ad.reshape(x, (1, 3)) if single else x
        proj = [ad.take_columns(pts2, c) for c in ((0, 1), (0, 2), (1, 2))]
    else:
        pts = np.atleast_2d(raw)
        proj = [pts[:, [0, 1]], pts[:, [0, 2]], pts[:, [1, 2]]]
    f_xy = bilinear_sample(planes.p_xy, proj[0])
    f_xz = bilinear_sample(planes.p_xz, proj[1])
    f_yz = bilinear_sample(planes.p_yz, proj[2])
    out = ad.concat([f_xy, f_xz, f_yz], axis=1)
    return ad.reshape(out, (-1,)) if single else out


def sample_density(grid: DensityGrid, x) -> Tensor:
    """Trilinear density feature s(x). Accepts [3] or [N, 3]."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    single = arr.ndim == 1
    if isinstance(x, Tensor) and x.requires_grad:
        out = trilinear_sample(grid.d, ad.reshape(x, (1, 3)) if single else x)
    else:
        out = trilinear_sample(grid.d, np.atleast_2d(arr))
    return ad.reshape(out, ()) if single else out


def decode(f_a: Tensor, s: Tensor, v_view, mlp: RendererMLP) -> tuple[Tensor, Tensor]:
    """Decode per-sample (sigma, color) from features and view direction.

    sigma = softplus(density head + s); color = sigmoid(color head).
    """
    f2 = f_a if f_a.data.ndim == 2 else ad.reshape(f_a, (1, -1))
    n = f2.shape[0]
    if f2.shape[1] != 3 * mlp.channels:
        raise ValueError("feature width must be 3*C")
    s1 = s if s.data.ndim == 1 else ad.reshape(s, (-1,))
    view = np.broadcast_to(np.asarray(v_view, dtype=np.float64).reshape(-1, 3),
                           (n, 3))
    x = ad.concat([f2, ad.reshape(s1, (n, 1)), Tensor(view)], axis=1)
    h = ad.affine(x, mlp.w1, mlp.b1, "relu")
    h = ad.affine(h, mlp.w2, mlp.b2, "relu")
    raw = ad.take_column(ad.affine(h, mlp.w_sigma, mlp.b_sigma), 0)
    sigma = ad.softplus(raw + s1)
    color = ad.affine(h, mlp.w_color, mlp.b_color, "sigmoid")
    if f_a.data.ndim == 1:
        return ad.reshape(sigma, ()), ad.reshape(color, (3,))
    return sigma, color


# ---------------------------------------------------------------------------
# volume rendering
# ---------------------------------------------------------------------------

def composite_rays(sigma: Tensor, color: Tensor,
                   deltas: np.ndarray) -> tuple[Tensor, Tensor]:
    """Alpha-composite per-sample (sigma [R, K], color [R*K, 3]) into per-ray
    RGB [R, 3] and accumulated opacity [R]."""
    r, k = sigma.shape
    sd = sigma * Tensor(deltas)
    trans = ad.exp(ad.neg(ad.exclusive_cumsum(sd, axis=1)))
    alpha = 1.0 - ad.exp(ad.neg(sd))
    weights = trans * alpha
    opacity = ad.sum_(weights, axis=1)
    chans = [ad.reshape(ad.sum_(weights * ad.reshape(ad.take_column(color, i),
                                                     (r, k)), axis=1), (r, 1))
             for i in range(3)]
    return ad.concat(chans, axis=1), opacity


def field_query(planes: FeaturePlanes, grid: DensityGrid, mlp: RendererMLP):
    """Standard query: tri-plane + density sampling followed by MLP decode."""

    def query(points: np.ndarray, viewdirs: np.ndarray):
        f_a = sample_triplane(planes, points)
        s = sample_density(grid, points)
        return decode(f_a, s, viewdirs, mlp)

    return query


def render_rays(query, origins: np.ndarray, dirs: np.ndarray,
                t_vals: np.ndarray, deltas: np.ndarray) -> tuple[Tensor, Tensor]:
    """Render a batch of rays through any (sigma, color) query function."""
    r, k = t_vals.shape
    points = (origins[:, None, :] + t_vals[:, :, None] * dirs[:, None, :])
    points = points.reshape(r * k, 3)
    viewdirs = np.repeat(dirs, k, axis=0)
    sigma, color = query(points, viewdirs)
    return composite_rays(ad.reshape(sigma, (r, k)), color, deltas)


def render_ray(planes: FeaturePlanes, grid: DensityGrid, mlp: RendererMLP,
               ray: Ray) -> tuple[Tensor, Tensor]:
    """Render one ray; returns (rgb [3], accumulated opacity scalar)."""
    rgb, opacity = render_rays(field_query(planes, grid, mlp),
                               ray.origin[None], ray.direction[None],
                               ray.t_vals[None], ray.deltas[None])
    return ad.reshape(rgb, (3,)), ad.reshape(opacity, ())


def render_image(planes: FeaturePlanes, grid: DensityGrid, mlp: RendererMLP,
                 pose: CameraPose, samples_per_ray: int,
                 chunk: int = 2048) -> np.ndarray:
    """Deterministic full-frame render, [3, h, w]. Forward only."""
    origins, dirs = camera_rays(pose)
    near, far = ray_box_bounds(origins, dirs)
    t_vals, deltas = sample_ts(near, far, samples_per_ray, 0.5)
    query = field_query(planes, grid, mlp)
    out = np.zeros((origins.shape[0], 3))
    for lo in range(0, origins.shape[0], chunk):
        hi = min(lo + chunk, origins.shape[0])
        rgb, _ = render_rays(query, origins[lo:hi], dirs[lo:hi],
                             t_vals[lo:hi], deltas[lo:hi])
        out[lo:hi] = rgb.data
    return out.T.reshape(3, pose.height, pose.width)


# ---------------------------------------------------------------------------
# rays and cameras
# ---------------------------------------------------------------------------

def camera_rays(pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel world-space rays, row-major over the image."""
    i, j = np.meshgrid(np.arange(pose.height, dtype=np.float64),
                       np.arange(pose.width, dtype=np.float64), indexing="ij")
    dirs_cam = np.stack([(j + 0.5 - pose.cx) / pose.fx,
                         -(i + 0.5 - pose.cy) / pose.fy,
                         -np.ones_like(i)], axis=-1).reshape(-1, 3)
    rot = pose.c2w[:, :3]
    dirs = dirs_cam @ rot.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.c2w[:, 3], dirs.shape).copy()
    return origins, dirs


def ray_box_bounds(origins: np.ndarray, dirs: np.ndarray,
                   lo: float = -1.0, hi: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Slab intersection of rays with the scene box; misses get near == far."""
    inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1).max(axis=1)
    tmax = np.maximum(t0, t1).min(axis=1)
    near = np.maximum(tmin, 0.0)
    far = np.maximum(tmax, near)
    miss = far <= near + FAR_EPS
    near = np.where(miss, 0.0, near)
    far = np.where(miss, 0.0, far)
    return near, far


def sample_ts(near: np.ndarray, far: np.ndarray, k: int,
              offsets) -> tuple[np.ndarray, np.ndarray]:
    """Uniform stratified samples in [near, far] plus spacings.

    ``offsets`` is either a scalar in [0, 1) (deterministic rendering uses
    0.5) or an [R, K] array of per-bin offsets. The last spacing is padded
    with the nominal bin width.
    """
    r = near.shape[0]
    step = ((far - near) / k)[:, None]
    off = np.broadcast_to(np.asarray(offsets, dtype=np.float64), (r, k))
    t_vals = near[:, None] + (np.arange(k)[None, :] + off) * step
    deltas = np.concatenate([np.diff(t_vals, axis=1),
                             np.broadcast_to(step, (r, 1))], axis=1)
    return t_vals, deltas


def make_ray(origin, direction, near: float, far: float, k: int,
             offsets=0.5) -> Ray:
    """Build a Ray with uniform stratified samples between near and far."""
    t_vals, deltas = sample_ts(np.array([near]), np.array([far]), k, offsets)
    return Ray(np.asarray(origin, dtype=np.float64),
               np.asarray(direction, dtype=np.float64),
               t_vals[0], deltas[0])


def look_at_pose(position, target, width: int, height: int,
                 fov_deg: float = 55.0, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Camera at ``position`` looking at ``target`` (OpenGL convention:
    the camera looks down its local -z)."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    back = position - target
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    nrm = np.linalg.norm(right)
    if nrm < 1e-9:
        right = np.cross(np.array([0.0, 1.0, 0.0]), back)
        nrm = np.linalg.norm(right)
    right /= nrm
    upv = np.cross(back, right)
    c2w = np.stack([right, upv, back, position], axis=1)
    focal = 0.5 * width / math.tan(0.5 * math.radians(fov_deg))
    return CameraPose(c2w, focal, focal, width / 2.0, height / 2.0,
                      width, height)


# ---------------------------------------------------------------------------
# field bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldDims:
    channels: int = 12
    plane_h: int = 32
    plane_w: int = 32
    grid_y: int = 32
    grid_x: int = 32
    grid_z: int = 32
    hidden: int = 64


@dataclass
class Field:
    planes: FeaturePlanes
    grid: DensityGrid
    mlp: RendererMLP

    def field_parameters(self) -> list[tuple[str, Tensor]]:
        return self.planes.named() + [("grid", self.grid.d)]

    def mlp_parameters(self) -> list[tuple[str, Tensor]]:
        return self.mlp.named()

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.field_parameters() + self.mlp_parameters()


def init_field(dims: FieldDims, seed: int) -> Field:
    """Seeded initialization: small random planes, near-empty density."""
    rng = np.random.default_rng([seed, 0xF1E1D])
    planes = FeaturePlanes(
        *(Tensor(0.1 * rng.standard_normal((dims.channels, dims.plane_h,
                                            dims.plane_w)),
                 requires_grad=True) for _ in range(3)))
    grid = DensityGrid(Tensor(
        -1.0 + 0.05 * rng.standard_normal((dims.grid_y, dims.grid_x,
                                           dims.grid_z)),
        requires_grad=True))
    mlp = RendererMLP(dims.channels, dims.hidden, rng)
    return Field(planes, grid, mlp)
