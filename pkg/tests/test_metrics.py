"""PSNR, payload estimator, and BD-rate closed forms."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sclrf import metrics
from sclrf.metrics import RDCurve, RDPoint, bd_rate, payload_estimate, psnr


class TestPSNR:
    def test_identical_caps_at_99(self):
        img = np.random.default_rng(0).random((3, 8, 8))
        assert psnr(img, img) == 99.0

    def test_constant_error(self):
        a = np.zeros((3, 4, 4))
        assert psnr(a, a + 0.1) == pytest.approx(20.0)

    def test_mse_1em4_is_40db(self):
        a = np.zeros(16)
        assert psnr(a, a + 0.01) == pytest.approx(40.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros(3), np.zeros(4))

    @given(e1=st.floats(min_value=1e-3, max_value=0.5),
           e2=st.floats(min_value=1e-3, max_value=0.5))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_mse(self, e1, e2):
        """Strictly lower MSE gives strictly higher PSNR."""
        a = np.zeros(8)
        if abs(e1 - e2) < 1e-9:
            return
        lo, hi = sorted([e1, e2])
        assert psnr(a, a + lo) > psnr(a, a + hi)


class TestPayloadEstimate:
    def test_constant_tensor_header_only(self):
        # d = 2 -> header = 2*32 + 8 + 32*2 = 136 bits, zero entropy
        e = payload_estimate("t", np.full((4, 4), 3.25))
        assert e.entropy_bits == 0.0
        assert e.header_bits == 136
        assert e.total_bits == 136

    def test_uniform_256_levels(self):
        # every 8-bit level hit once: H = 8 bits/element, N = 256, d = 1
        values = np.arange(256.0)
        e = payload_estimate("t", values)
        assert e.entropy_bits == pytest.approx(256 * 8)
        assert e.header_bits == 2 * 32 + 8 + 32
        assert e.total_bits == pytest.approx(2048 + 104)

    def test_two_equiprobable_levels(self):
        e = payload_estimate("t", np.array([0.0, 1.0, 0.0, 1.0]))
        assert e.entropy_bits == pytest.approx(4.0)  # binary entropy of 1/2
        assert e.total_bits == pytest.approx(4 + 104)

    def test_header_scales_with_dims(self):
        for d in range(1, 5):
            e = payload_estimate("t", np.zeros((2,) * d))
            assert e.header_bits == 2 * 32 + 8 + 32 * d

    @given(seed=st.integers(min_value=0, max_value=2**31),
           n=st.integers(min_value=1, max_value=400))
    @settings(max_examples=60, deadline=None)
    def test_entropy_bounds(self, seed, n):
        """0 <= H_bits <= N * q_bits."""
        values = np.random.default_rng(seed).standard_normal(n)
        e = payload_estimate("t", values)
        assert 0.0 <= e.entropy_bits <= n * 8 + 1e-9

    def test_report_additivity(self):
        entries = [payload_estimate(f"t{i}", np.random.default_rng(i).random(10))
                   for i in range(5)]
        report = metrics.PayloadReport(entries)
        assert report.total_bits == pytest.approx(
            sum(e.total_bits for e in entries))

    def test_report_csv_columns(self):
        report = metrics.PayloadReport([payload_estimate("a", np.zeros((2, 2)))])
        header = report.to_csv().splitlines()[0]
        assert header == "tensor,n_elements,n_dims,entropy_bits,header_bits,total_bits"


def _curve(rates, qualities):
    return RDCurve([RDPoint(r, q) for r, q in zip(rates, qualities)])


class TestBDRate:
    RATES = [1e5, 2e5, 4e5, 8e5]
    QUALS = [30.0, 33.0, 36.0, 39.0]

    def test_identical_curves_zero(self):
        a = _curve(self.RATES, self.QUALS)
        b = _curve(self.RATES, self.QUALS)
        assert bd_rate(a, b) == pytest.approx(0.0, abs=1e-9)

    def test_double_rate_is_plus_100(self):
        # constant log gap ln(2) integrates to exp(ln 2) - 1 = +100%
        a = _curve(self.RATES, self.QUALS)
        b = _curve([2 * r for r in self.RATES], self.QUALS)
        assert bd_rate(a, b) == pytest.approx(100.0, abs=1e-6)

    def test_half_rate_is_minus_50(self):
        a = _curve(self.RATES, self.QUALS)
        b = _curve([0.5 * r for r in self.RATES], self.QUALS)
        assert bd_rate(a, b) == pytest.approx(-50.0, abs=1e-6)

    def test_antisymmetry_in_log_domain(self):
        rng = np.random.default_rng(5)
        qual_b = [q + d for q, d in zip(self.QUALS, rng.uniform(-0.5, 0.5, 4))]
        a = _curve(self.RATES, self.QUALS)
        b = _curve([1.7 * r for r in self.RATES], qual_b)
        fwd = bd_rate(a, b)
        rev = bd_rate(b, a)
        assert (1 + fwd / 100.0) * (1 + rev / 100.0) == pytest.approx(1.0,
                                                                      abs=1e-9)

    def test_no_overlap_rejected(self):
        a = _curve(self.RATES, [10.0, 11.0, 12.0, 13.0])
        b = _curve(self.RATES, [20.0, 21.0, 22.0, 23.0])
        with pytest.raises(ValueError, match="overlap"):
            bd_rate(a, b)

    def test_too_few_points_rejected(self):
        a = _curve(self.RATES[:3], self.QUALS[:3])
        b = _curve(self.RATES, self.QUALS)
        with pytest.raises(ValueError, match="4 points"):
            bd_rate(a, b)

    def test_curve_requires_increasing_bitrate(self):
        with pytest.raises(ValueError):
            _curve([2e5, 1e5], [30.0, 33.0])

    def test_negative_means_fewer_bits(self):
        a = _curve(self.RATES, self.QUALS)
        better = _curve([0.75 * r for r in self.RATES], self.QUALS)
        assert bd_rate(a, better) < 0
