"""Checkpoint format: a flat npz container of named double-precision
tensors (planes, grid, MLP weights, optional optimizer moments)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .field import DensityGrid, FeaturePlanes, Field, RendererMLP
from .trainer import AdamState


def save_field(path, fld: Field, opt_field: AdamState | None = None,
               opt_mlp: AdamState | None = None) -> None:
    arrays = {name: t.data for name, t in fld.parameters()}
    if opt_field is not None:
        arrays["opt_field_t"] = np.array(opt_field.t)
        for i, (m, v) in enumerate(zip(opt_field.m, opt_field.v)):
            arrays[f"opt_field_m{i}"] = m
            arrays[f"opt_field_v{i}"] = v
    if opt_mlp is not None:
        arrays["opt_mlp_t"] = np.array(opt_mlp.t)
        for i, (m, v) in enumerate(zip(opt_mlp.m, opt_mlp.v)):
            arrays[f"opt_mlp_m{i}"] = m
            arrays[f"opt_mlp_v{i}"] = v
    np.savez(path, **arrays)


def load_field(path) -> Field:
    """Rebuild a Field from a checkpoint; dims are inferred from shapes."""
    with np.load(path) as data:
        arrays = {k: np.array(data[k]) for k in data.files}
    planes = FeaturePlanes(
        Tensor(arrays["plane_xy"], requires_grad=True),
        Tensor(arrays["plane_xz"], requires_grad=True),
        Tensor(arrays["plane_yz"], requires_grad=True))
    grid = DensityGrid(Tensor(arrays["grid"], requires_grad=True))
    channels = arrays["plane_xy"].shape[0]
    hidden = arrays["mlp_b1"].shape[0]
    mlp = RendererMLP(channels, hidden, np.random.default_rng(0))
    for name, t in mlp.named():
        t.data = arrays[name]
    return Field(planes, grid, mlp)


def load_named_tensors(path) -> dict[str, np.ndarray]:
    """Raw view of a checkpoint, e.g. for payload estimation."""
    with np.load(Path(path)) as data:
        return {k: np.array(data[k]) for k in data.files}
