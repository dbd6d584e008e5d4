"""Gradient surrogates that pass training gradients through the
non-differentiable codec round trip: plain STE, a modified STE that
rescales the detached codec error by its standard deviation, and a hybrid
that swaps in an SPSA diagonal-sensitivity estimate on cache-refresh steps.

All three render from exactly the decoded values: the override's forward
values equal the decoded tensor bit-for-bit, only the backward differs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .quantpack import Canvas

STE = "ste"
MSTE = "mste"
STE_SPSA = "ste_spsa"


@dataclass(frozen=True)
class SurrogateKind:
    kind: str = STE
    spsa_eps: float = 0.01        # perturbation scale for SPSA refresh steps
    spsa_draws: int = 1           # perturbation draws averaged per refresh
    mste_var_guard: float = 1e-6  # floor on the perturbation std

    def __post_init__(self):
        if self.kind not in (STE, MSTE, STE_SPSA):
            raise ValueError(f"unknown surrogate kind: {self.kind}")
        if self.kind == STE_SPSA and not self.spsa_eps > 0:
            raise ValueError("ste_spsa requires spsa_eps > 0")


@dataclass
class SurrogateContext:
    """Per-step information the hybrid estimator needs."""

    is_refresh_step: bool = False
    sensitivity: Optional[np.ndarray] = None  # SPSA diagonal, raw-tensor shape


def _as_constant(p_hat) -> Tensor:
    t = p_hat if isinstance(p_hat, Tensor) else Tensor(p_hat)
    if t.requires_grad:
        raise ValueError("decoded tensor must not carry gradients")
    return t


def ste_override(p: Tensor, p_hat) -> Tensor:
    """P_tilde = P_hat + (P - detach(P)): decoded values forward, identity
    Jacobian backward."""
    hat = _as_constant(p_hat)
    if hat.data.shape != p.data.shape:
        raise ValueError("decoded tensor shape must match the raw tensor")
    return hat + (p - ad.detach(p))


def mste_override(p: Tensor, p_hat, var_guard: float = 1e-6) -> Tensor:
    """STE with the detached codec error rescaled by its own std.

    P_tilde = P + sg(eps) * sigma(eps) / sg(sigma(eps)) with eps = P_hat - P
    and sigma the scalar std over the whole tensor, floored at ``var_guard``.
    Rearranged as P_hat + (P - detach P) + sg(eps) * (sigma/sg(sigma) - 1) so
    the forward values equal P_hat exactly while the backward picks up the
    sigma path.
    """
    hat = _as_constant(p_hat)
    if hat.data.shape != p.data.shape:
        raise ValueError("decoded tensor shape must match the raw tensor")
    eps = hat - p
    centered = eps - ad.mean(eps)
    # Guard on the variance, not the std: sqrt then sees a strictly positive
    # (or constant) input, so its backward never divides by zero.
    sigma = ad.sqrt(ad.clip_min(ad.mean(ad.square(centered)), var_guard ** 2))
    ratio = sigma / ad.detach(sigma)
    correction = ad.detach(eps) * (ratio - 1.0)
    return hat + (p - ad.detach(p)) + correction


def spsa_diag_jacobian(codec_map: Callable[[np.ndarray], np.ndarray],
                       y, eps: float,
                       rng: Optional[np.random.Generator] = None,
                       delta: Optional[np.ndarray] = None,
                       draws: int = 1) -> np.ndarray:
    """Elementwise two-point sensitivity of a black-box canvas map.

    g_i = (f(y + eps*delta) - f(y - eps*delta)) / (2 * eps * delta_i) with
    delta_i = +-1 symmetric Bernoulli. One draw by default; the caller is
    responsible for keeping y +- eps*delta inside the map's valid range.
    """
    if eps <= 0:
        raise ValueError("spsa perturbation scale must be positive")
    values = y.values if isinstance(y, Canvas) else np.asarray(y, dtype=np.float64)
    if delta is not None:
        deltas = [np.asarray(delta, dtype=np.float64)]
    else:
        rng = rng or np.random.default_rng()
        deltas = [rng.integers(0, 2, size=values.shape) * 2.0 - 1.0
                  for _ in range(draws)]
    total = np.zeros_like(values)
    for dlt in deltas:
        hi = codec_map(values + eps * dlt)
        lo = codec_map(values - eps * dlt)
        total += (np.asarray(hi) - np.asarray(lo)) / (2.0 * eps * dlt)
    return total / len(deltas)


def apply_surrogate(kind: SurrogateKind, p: Tensor, p_hat,
                    context: Optional[SurrogateContext] = None) -> Tensor:
    """Dispatch to the configured override.

    For ``ste_spsa`` the backward is multiplied elementwise by the SPSA
    diagonal estimate on cache-refresh steps and is plain STE otherwise.
    """
    ctx = context or SurrogateContext()
    if kind.kind == STE:
        return ste_override(p, p_hat)
    if kind.kind == MSTE:
        return mste_override(p, p_hat, kind.mste_var_guard)
    if kind.kind == STE_SPSA:
        if ctx.is_refresh_step and ctx.sensitivity is not None:
            hat = _as_constant(p_hat)
            if hat.data.shape != p.data.shape:
                raise ValueError("decoded tensor shape must match the raw tensor")
            return hat + ad.scale_grad(p - ad.detach(p), ctx.sensitivity)
        return ste_override(p, p_hat)
    raise ValueError(f"unknown surrogate kind: {kind.kind}")
