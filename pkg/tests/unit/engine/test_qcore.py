#!/usr/bin/env python3
"""
Unit tests for the quantization core
Calibration, quantize/dequantize, fixed-scale derivation and ApproxMul
"""

import math
from fractions import Fraction

import numpy as np
import pytest

from int_transformer.errors import CalibrationError, QuantizationError
from int_transformer.qcore import (
    FixedScale,
    IntTensor,
    Observer,
    QParams,
    approx_mul,
    calibrate,
    clamp_bits,
    dequantize,
    derive_fixed_scale,
    quantize,
    quantize_bias,
    round_half_away,
)


def _exact_round(value: Fraction) -> int:
    magnitude = math.floor(abs(value) + Fraction(1, 2))
    return magnitude if value >= 0 else -magnitude


class TestRounding:
    """Test rounding and clamping helpers"""

    def test_round_half_away_scalars(self):
        """Ties move away from zero"""
        assert round_half_away(0.5) == 1
        assert round_half_away(-0.5) == -1
        assert round_half_away(2.5) == 3
        assert round_half_away(-2.4) == -2
        assert isinstance(round_half_away(1.2), int)

    def test_round_half_away_array(self):
        """Arrays come back as int64"""
        result = round_half_away(np.array([-1.5, -0.49, 0.0, 1.5]))
        assert result.dtype == np.int64
        assert result.tolist() == [-2, 0, 0, 2]

    def test_round_half_away_just_below_tie(self):
        """The largest double under 0.5 rounds down, not up"""
        below = np.nextafter(0.5, 0.0)
        assert round_half_away(below) == 0
        assert round_half_away(-below) == 0
        assert round_half_away(np.array([below, 0.5, -0.5])).tolist() == [0, 1, -1]
        assert quantize([below], QParams(1.0, 0, 8)).data.tolist() == [0]
        assert round_half_away(np.nextafter(2.5, 0.0)) == 2
        assert round_half_away(-2.5) == -3

    def test_clamp_bits(self):
        """Scalars and arrays clamp to the signed range"""
        assert clamp_bits(200, 8) == 127
        assert clamp_bits(-9, 4) == -8
        assert clamp_bits(np.array([-300, 5, 300]), 8).tolist() == [-128, 5, 127]


class TestQParams:
    """Test QParams validation"""

    def test_valid_qparams(self):
        qp = QParams(0.5, -3, 6)
        assert (qp.qmin, qp.qmax) == (-32, 31)
        assert qp.constant is False

    @pytest.mark.parametrize('scale, zero_point, bitwidth', [
        (0.0, 0, 8),
        (-1.0, 0, 8),
        (float('nan'), 0, 8),
        (1.0, 128, 8),
        (1.0, -9, 4),
        (1.0, 0, 5),
    ])
    def test_invalid_qparams(self, scale, zero_point, bitwidth):
        """Invalid scale, zero point or bitwidth is rejected"""
        with pytest.raises(QuantizationError):
            QParams(scale, zero_point, bitwidth)

    def test_errors_are_value_errors(self):
        with pytest.raises(ValueError):
            QParams(1.0, 0, 7)


class TestIntTensor:
    """Test the IntTensor container"""

    def test_rejects_floating_point_data(self):
        with pytest.raises(QuantizationError):
            IntTensor(np.array([1.0, 2.0]), QParams(1.0, 0, 8))

    def test_rejects_out_of_range_values(self):
        with pytest.raises(QuantizationError):
            IntTensor(np.array([0, 8]), QParams(1.0, 0, 4))

    def test_data_is_read_only(self):
        tensor = IntTensor([[1, 2], [3, 4]], QParams(1.0, 0, 8))
        assert tensor.shape == (2, 2)
        assert tensor.data.dtype == np.int64
        with pytest.raises(ValueError):
            tensor.data[0, 0] = 5

    def test_with_data_keeps_qparams(self):
        qp = QParams(0.25, 1, 6)
        tensor = IntTensor([1, 2], qp).with_data([3, 4])
        assert tensor.qparams == qp
        assert tensor.data.tolist() == [3, 4]


class TestObserver:
    """Test the running min/max observer"""

    def test_tracks_running_range(self):
        observer = Observer()
        assert not observer.seen
        observer.update([1.0, -2.0])
        observer.update(np.array([[5.0]]))
        assert (observer.running_min, observer.running_max) == (-2.0, 5.0)
        assert observer.count == 3

    def test_empty_update_is_ignored(self):
        observer = Observer.from_values([3.0])
        observer.update([])
        assert observer.count == 1

    def test_non_finite_value_raises(self):
        with pytest.raises(CalibrationError):
            Observer().update([1.0, np.inf])

    def test_including_zero(self):
        widened = Observer.from_range(0.5, 2.0).including_zero()
        assert (widened.running_min, widened.running_max) == (0.0, 2.0)
        negative = Observer.from_range(-3.0, -1.0).including_zero()
        assert (negative.running_min, negative.running_max) == (-3.0, 0.0)


class TestCalibrate:
    """Test min-max calibration"""

    def test_symmetric_range(self):
        """(-1, 1) at b=8 gives S = 2/255 and Z = 0"""
        qp = calibrate(Observer.from_range(-1.0, 1.0), 8)
        assert qp.scale == pytest.approx(2 / 255, rel=1e-15)
        assert qp.zero_point == 0
        assert not qp.constant

    def test_degenerate_range(self):
        """A constant tensor maps with S=1, Z=0 and is flagged"""
        qp = calibrate(Observer.from_range(0.0, 0.0), 8)
        assert (qp.scale, qp.zero_point, qp.constant) == (1.0, 0, True)

    def test_zero_point_clamps(self):
        """(0, 255 s) at b=8 gives S = s, Z clamped to -128"""
        s = 0.013
        qp = calibrate(Observer.from_range(0.0, 255 * s), 8)
        assert qp.scale == pytest.approx(s)
        assert qp.zero_point == -128

    def test_unseen_observer_raises(self):
        with pytest.raises(CalibrationError):
            calibrate(Observer(), 8)

    def test_unsupported_bitwidth_raises(self):
        with pytest.raises(QuantizationError):
            calibrate(Observer.from_range(0.0, 1.0), 3)

    def test_random_ranges_give_valid_qparams(self, rng):
        """Any non-degenerate range, including ones where the clamp engages"""
        for _ in range(500):
            low, high = np.sort(rng.uniform(-50, 50, size=2))
            shift = rng.choice([0.0, 100.0, -100.0])
            for bits in (4, 6, 8):
                qp = calibrate(Observer.from_range(low + shift, high + shift), bits)
                assert qp.scale > 0
                assert qp.qmin <= qp.zero_point <= qp.qmax


class TestQuantize:
    """Test quantize and dequantize"""

    def test_zero_maps_to_zero_point(self):
        assert quantize(0.0, QParams(1.0, 0, 8)).data.item() == 0
        assert quantize(0.0, QParams(0.1, -7, 8)).data.item() == -7

    def test_clamps_after_rounding(self):
        qp = QParams(2 / 255, 0, 8)
        assert quantize(1.0, qp).data.item() == 127
        assert quantize(-1.0, qp).data.item() == -128

    def test_non_finite_input_names_index(self):
        with pytest.raises(QuantizationError, match=r"index \(1, 0\)"):
            quantize(np.array([[0.0], [np.nan]]), QParams(1.0, 0, 8))

    def test_dequantize(self):
        qp = QParams(2 / 255, 0, 8)
        assert dequantize(IntTensor([127], qp))[0] == pytest.approx(254 / 255)
        assert dequantize(IntTensor([-4], QParams(0.5, -4, 8)))[0] == 0.0

    def test_roundtrip_within_half_step(self, rng):
        """|dequantize(quantize(x)) - x| <= S/2 inside the representable range"""
        for _ in range(200):
            low, high = np.sort(rng.uniform(-10, 10, size=2))
            bits = int(rng.choice([4, 6, 8]))
            qp = calibrate(Observer.from_range(low, high), bits)
            lo = qp.scale * (qp.qmin - qp.zero_point)
            hi = qp.scale * (qp.qmax - qp.zero_point)
            x = rng.uniform(lo, hi, size=64)
            error = np.abs(dequantize(quantize(x, qp)) - x)
            assert np.all(error <= qp.scale / 2 * (1 + 1e-9))

    def test_quantize_bias_symmetric(self):
        assert quantize_bias([0.3125, -0.3125, 0.0], 0.125).tolist() == [3, -3, 0]

    def test_quantize_bias_saturates_with_warning(self, caplog):
        with caplog.at_level('WARNING', logger='int_transformer.qcore'):
            result = quantize_bias([1e12], 1e-3)
        assert result.tolist() == [2 ** 31 - 1]
        assert 'saturated' in caplog.text


class TestFixedScale:
    """Test derive_fixed_scale and approx_mul"""

    def test_half(self):
        fs = derive_fixed_scale(0.5, 16)
        assert (fs.multiplier, fs.shift) == (32768, 16)

    def test_one(self):
        fs = derive_fixed_scale(1.0, 16)
        assert (fs.multiplier, fs.shift) == (32768, 15)

    def test_tiny_ratio(self):
        r = 2.0 ** -20
        fs = derive_fixed_scale(r, 16)
        assert abs(fs.value - r) <= 2.0 ** (-fs.shift - 1)

    def test_deterministic(self):
        assert derive_fixed_scale(0.3183, 16) == derive_fixed_scale(0.3183, 16)

    @pytest.mark.parametrize('ratio', [0.0, -1.0, float('inf'), float('nan'), 2.0 ** 40])
    def test_unrepresentable_ratio_raises(self, ratio):
        with pytest.raises(QuantizationError):
            derive_fixed_scale(ratio, 16)

    def test_width_out_of_range_raises(self):
        with pytest.raises(QuantizationError):
            derive_fixed_scale(0.5, 7)

    def test_multiplier_must_fit_width(self):
        with pytest.raises(QuantizationError):
            FixedScale(1 << 16, 3, 0.1, 16)

    @pytest.mark.parametrize('v, multiplier, shift, expected', [
        (4, 32768, 15, 4),
        (4, 32768, 16, 2),
        (-3, 32768, 16, -2),
        (3, 32768, 16, 2),
        (-7, 5, 0, -35),
    ])
    def test_approx_mul_examples(self, v, multiplier, shift, expected):
        assert approx_mul(v, FixedScale(multiplier, shift, multiplier / 2 ** shift)) == expected

    def test_approx_mul_array(self):
        fs = FixedScale(32768, 16, 0.5)
        result = approx_mul(np.array([-3, -1, 1, 3]), fs)
        assert result.dtype == np.int64
        assert result.tolist() == [-2, -1, 1, 2]

    def test_log_uniform_ratio_sweep(self, rng):
        """10^4 ratios in (2^-16, 2^8): |M 2^-n - r| <= 2^(-n-1) and ApproxMul tracks v*r"""
        ratios = np.exp2(rng.uniform(-16, 8, size=10_000))
        values = rng.integers(-(1 << 20), (1 << 20) + 1, size=32)
        values[:2] = (-(1 << 20), 1 << 20)
        for r in ratios:
            fs = derive_fixed_scale(float(r), 16)
            assert fs.multiplier < (1 << 16)
            assert abs(fs.value - r) <= 2.0 ** (-fs.shift - 1)

            result = approx_mul(values, fs)
            # rounding contributes 1/2, the dyadic approximation |v| 2^(-n-1)
            bound = 0.5 + np.abs(values) * 2.0 ** (-fs.shift - 1) + 1e-6
            assert np.all(np.abs(result - values * float(r)) <= bound)

            small = values[np.abs(values) <= (1 << fs.shift)]
            assert np.all(np.abs(approx_mul(small, fs) - small * float(r)) <= 1 + 1e-6)

    def test_approx_mul_matches_exact_rounding(self, rng):
        """ApproxMul equals round-half-away of v*M/2^n evaluated exactly"""
        ratios = np.exp2(rng.uniform(-16, 8, size=300))
        values = rng.integers(-(1 << 20), (1 << 20) + 1, size=40)
        for r in ratios:
            fs = derive_fixed_scale(float(r), 16)
            result = approx_mul(values, fs)
            for v, got in zip(values.tolist(), result.tolist()):
                assert got == _exact_round(Fraction(v * fs.multiplier, 1 << fs.shift))
