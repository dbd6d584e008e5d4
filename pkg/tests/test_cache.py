"""Decoded-tensor cache: drift metric, refresh policy, round-trip refresh."""

import math

import numpy as np
import pytest

from sclrf import cache as ch
from sclrf.autodiff import Tensor
from sclrf.cache import CacheState, CodecPipeline, QuantConfig, compute_drift
from sclrf.codec import CodecConfig
from sclrf.field import DensityGrid, FeaturePlanes
from sclrf.surrogate import SurrogateKind


def small_field(seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    planes = FeaturePlanes(*(Tensor(scale * rng.standard_normal((4, 6, 6)),
                                    requires_grad=True) for _ in range(3)))
    grid = DensityGrid(Tensor(scale * rng.standard_normal((4, 4, 4)),
                              requires_grad=True))
    return planes, grid


def identity_pipeline(**kwargs) -> CodecPipeline:
    return CodecPipeline(codec=CodecConfig(backend="identity"), **kwargs)


class TestDrift:
    def test_zero_for_identical(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        assert compute_drift(x, x.copy()) == 0.0

    def test_scaling_identity(self):
        x = np.random.default_rng(1).standard_normal(64) + 3.0
        assert compute_drift(1.06 * x, x) == pytest.approx(0.06, rel=1e-9)

    def test_zero_snapshot_guarded(self):
        drift = compute_drift(np.ones(4), np.zeros(4))
        assert np.isfinite(drift)
        assert drift > 1e6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compute_drift(np.ones(3), np.ones(4))


class TestShouldRefresh:
    def test_empty_cache_refreshes(self):
        planes, grid = small_field()
        assert ch.should_refresh(CacheState(), 0, 128, 0.05, planes, grid)

    def test_step_budget_refreshes_at_exactly_m(self):
        planes, grid = small_field()
        state = ch.refresh(CacheState(), planes, grid, identity_pipeline(), 0)
        assert not ch.should_refresh(state, 127, 128, math.inf, planes, grid)
        assert ch.should_refresh(state, 128, 128, math.inf, planes, grid)

    def test_drift_above_threshold_refreshes_early(self):
        planes, grid = small_field()
        state = ch.refresh(CacheState(), planes, grid, identity_pipeline(), 0)
        planes.p_xy.data *= 1.06  # 6% normalized l2 drift > 0.05
        assert ch.should_refresh(state, 3, 128, 0.05, planes, grid)
        assert ch.refresh_reason(state, 3, 128, 0.05, planes, grid) == "drift"

    def test_drift_below_threshold_keeps_cache(self):
        planes, grid = small_field()
        state = ch.refresh(CacheState(), planes, grid, identity_pipeline(), 0)
        planes.p_xy.data *= 1.01
        assert not ch.should_refresh(state, 3, 128, 0.05, planes, grid)


class TestRefresh:
    def test_identity_codec_decodes_to_8bit_rounding(self):
        planes, grid = small_field(scale=0.5)
        state = ch.refresh(CacheState(), planes, grid, identity_pipeline(), 0)
        # appearance range [-5, 5]: one 8-bit step is 10/255
        for key, raw in (("xy", planes.p_xy.data), ("density", grid.d.data)):
            hi = 50.0 if key == "density" else 10.0
            err = np.max(np.abs(state.decoded[key] - raw))
            assert err <= hi / 510.0 * (1 + 1e-9)

    def test_post_refresh_drift_is_zero(self):
        planes, grid = small_field()
        state = ch.refresh(CacheState(), planes, grid, identity_pipeline(), 0)
        assert ch.max_drift(state, planes, grid) == 0.0

    def test_deterministic(self):
        planes, grid = small_field()
        a = ch.refresh(CacheState(), planes, grid, identity_pipeline(), 0)
        b = ch.refresh(a, planes, grid, identity_pipeline(), 0)
        for key in a.decoded:
            np.testing.assert_array_equal(a.decoded[key], b.decoded[key])
        assert a.bits == b.bits

    def test_bits_sum_over_four_canvases(self):
        planes, grid = small_field()
        state = ch.refresh(CacheState(), planes, grid, identity_pipeline(), 0)
        per_plane = 8 * 6 * 6 * 4  # 4 channels -> (2,2) tile grid, 12x12 px
        per_density = 8 * 4 * 4 * 4
        assert state.bits == 3 * per_plane + per_density

    def test_snapshots_are_copies(self):
        planes, grid = small_field()
        state = ch.refresh(CacheState(), planes, grid, identity_pipeline(), 0)
        planes.p_xy.data += 100.0
        assert ch.max_drift(state, planes, grid) > 1.0  # snapshot unaffected

    def test_channelwise_bounds_counted_as_side_info(self):
        planes, grid = small_field()
        pipe = identity_pipeline(quant=QuantConfig(scheme="channelwise"))
        state = ch.refresh(CacheState(), planes, grid, pipe, 0)
        # 3 planes with 4 channels each + density treated channelwise over Dy
        assert state.side_info_bits == (3 * 4 + 4) * 2 * 32

    def test_spsa_sensitivities_computed_on_demand(self):
        planes, grid = small_field()
        pipe = identity_pipeline(surrogate=SurrogateKind("ste_spsa",
                                                         spsa_eps=0.01))
        state = ch.refresh(CacheState(), planes, grid, pipe, 0)
        assert set(state.sensitivities) == {"xy", "xz", "yz", "density"}
        assert state.sensitivities["xy"].shape == planes.p_xy.data.shape


class TestRefreshSchedule:
    def test_interval_only_schedule(self):
        """With drift disabled, refreshes land at exactly {0, M, 2M, ...}."""
        planes, grid = small_field()
        pipe = identity_pipeline()
        state = CacheState()
        refreshed_at = []
        m = 16
        for g in range(100):
            reason = ch.refresh_reason(state, g, m, math.inf, planes, grid)
            if reason is not None:
                state = ch.refresh(state, planes, grid, pipe, g, reason)
                refreshed_at.append(g)
            planes.p_xy.data *= 1.00001  # sub-threshold drift
        assert refreshed_at == [0, 16, 32, 48, 64, 80, 96]

    def test_cached_tensors_never_mutated_between_refreshes(self):
        planes, grid = small_field()
        state = ch.refresh(CacheState(), planes, grid, identity_pipeline(), 0)
        before = {k: v.copy() for k, v in state.decoded.items()}
        planes.p_xy.data += 0.5
        grid.d.data -= 0.2
        for key in before:
            np.testing.assert_array_equal(state.decoded[key], before[key])
