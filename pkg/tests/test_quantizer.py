import math

import numpy as np
import pytest

from hashquant.quantizer import (
    CalibrationError,
    ValueRange,
    calibrate_range,
    dequantize,
    dequantize_array,
    fake_quantize,
    make_activation_params,
    make_weight_params,
    quantize,
    quantize_array,
    round_half_away,
    ste_mask,
)


def test_round_half_away():
    assert round_half_away(0.5) == 1.0
    assert round_half_away(-0.5) == -1.0
    assert round_half_away(2.5) == 3.0
    assert round_half_away(-2.5) == -3.0
    assert round_half_away(0.0) == 0.0
    np.testing.assert_array_equal(round_half_away(np.array([1.5, -1.5, 0.4])), [2.0, -2.0, 0.0])


class TestCalibrateRange:
    def test_exact_minmax(self):
        r = calibrate_range([-1.0, 0.0, 1.0], percentile=1.0)
        assert (r.v_min, r.v_max) == (-1.0, 1.0)

    def test_degenerate_widened(self):
        r = calibrate_range([5.0], percentile=1.0)
        assert r.v_min == pytest.approx(5.0 - 1e-6)
        assert r.v_max == pytest.approx(5.0 + 1e-6)
        assert r.span > 0

    def test_percentile_normal_samples(self):
        # Sort-based oracle: a linearly interpolated quantile must land
        # between the bracketing order statistics of the same sample.
        rng = np.random.default_rng(7)
        samples = rng.standard_normal(10_000)
        r = calibrate_range(samples, percentile=0.999)
        s = np.sort(samples)
        tail = (1.0 - 0.999) / 2.0
        h_lo = tail * (len(s) - 1)
        h_hi = (1.0 - tail) * (len(s) - 1)
        assert s[math.floor(h_lo)] <= r.v_min <= s[math.ceil(h_lo)]
        assert s[math.floor(h_hi)] <= r.v_max <= s[math.ceil(h_hi)]
        assert r.v_min == pytest.approx(-3.29, abs=0.15)
        assert r.v_max == pytest.approx(3.29, abs=0.15)

    def test_errors(self):
        with pytest.raises(CalibrationError):
            calibrate_range([])
        with pytest.raises(CalibrationError):
            calibrate_range([1.0, float("nan")])
        with pytest.raises(ValueError):
            calibrate_range([1.0], percentile=0.0)

    def test_value_range_invariants(self):
        with pytest.raises(ValueError):
            ValueRange(2.0, 1.0)
        with pytest.raises(ValueError):
            ValueRange(float("inf"), 1.0)


class TestWeightParams:
    def test_eight_bit(self):
        p = make_weight_params(ValueRange(-1.0, 1.0), 8)
        assert p.scale == pytest.approx(2.0 / 255.0)
        assert (p.q_min, p.q_max, p.zero_point) == (-127, 127, 0)

    def test_two_bit(self):
        p = make_weight_params(ValueRange(-1.0, 1.0), 2)
        assert p.scale == pytest.approx(2.0 / 3.0)
        assert (p.q_min, p.q_max) == (-1, 1)

    def test_four_bit_shifted_range(self):
        p = make_weight_params(ValueRange(0.0, 4.0), 4)
        assert p.scale == pytest.approx(4.0 / 15.0)
        assert (p.q_min, p.q_max) == (-7, 7)

    def test_one_bit_uses_unit_codes(self):
        p = make_weight_params(ValueRange(-1.0, 1.0), 1)
        assert (p.q_min, p.q_max) == (-1, 1)
        assert p.scale == pytest.approx(2.0)

    def test_literal_bounds_switch(self):
        p = make_weight_params(ValueRange(-1.0, 1.0), 8, literal_bounds=True)
        assert (p.q_min, p.q_max) == (-129, 127)

    @pytest.mark.parametrize("bits", [0, 9, -1])
    def test_bits_out_of_range(self, bits):
        with pytest.raises(ValueError):
            make_weight_params(ValueRange(-1.0, 1.0), bits)


class TestActivationParams:
    def test_zero_floor_range(self):
        p = make_activation_params(ValueRange(0.0, 6.0), 8)
        assert p.zero_point == 0
        assert p.scale == pytest.approx(6.0 / 255.0)

    def test_negative_floor(self):
        p = make_activation_params(ValueRange(-2.0, 6.0), 4)
        assert p.zero_point == 4
        assert p.scale == pytest.approx(8.0 / 15.0)
        assert (p.q_min, p.q_max) == (0, 15)

    def test_tie_rounds_away_from_zero(self):
        p = make_activation_params(ValueRange(-3.0, 3.0), 8)
        assert p.zero_point == 128


class TestQuantizeDequantize:
    def test_symmetric_zero(self):
        p = make_weight_params(ValueRange(-1.0, 1.0), 8)
        assert quantize(p, 0.0) == 0
        assert dequantize(p, 0) == 0.0

    def test_symmetric_clip_at_max(self):
        p = make_weight_params(ValueRange(-1.0, 1.0), 8)
        assert quantize(p, 1.0) == 127

    def test_asymmetric_endpoints(self):
        p = make_activation_params(ValueRange(-2.0, 6.0), 4)
        assert quantize(p, 6.0) == 15
        assert quantize(p, -2.0) == 0

    def test_asymmetric_zero_point_maps_to_zero(self):
        p = make_activation_params(ValueRange(-2.0, 6.0), 4)
        assert dequantize(p, 4) == 0.0

    def test_round_trip_half(self):
        p = make_weight_params(ValueRange(-1.0, 1.0), 8)
        q = quantize(p, 0.5)
        assert q == 64
        back = dequantize(p, q)
        assert back == pytest.approx(0.50196, abs=1e-5)
        assert abs(back - 0.5) <= p.scale / 2

    def test_errors(self):
        p = make_weight_params(ValueRange(-1.0, 1.0), 8)
        with pytest.raises(ValueError):
            quantize(p, float("nan"))
        with pytest.raises(ValueError):
            dequantize(p, 128)


class TestFakeQuantize:
    def test_grid_points_are_fixed(self):
        p = make_weight_params(ValueRange(-1.0, 1.0), 4)
        grid = dequantize_array(p, np.arange(p.q_min, p.q_max + 1))
        np.testing.assert_allclose(fake_quantize(p, grid), grid, atol=1e-12)

    def test_rounding_bound_inside_range(self):
        p = make_weight_params(ValueRange(-1.0, 1.0), 6)
        x = np.linspace(-0.9, 0.9, 101)
        assert np.max(np.abs(fake_quantize(p, x) - x)) <= p.scale / 2 + 1e-12

    def test_clip_far_outside(self):
        p = make_weight_params(ValueRange(-1.0, 1.0), 8)
        assert fake_quantize(p, 10.0) == pytest.approx(254.0 / 255.0, abs=1e-9)

    def test_ste_matches_clip_surrogate_derivative(self):
        # The training-time gradient contract: 1 strictly inside the
        # representable range, 0 outside. Checked against central finite
        # differences of the clip surrogate x -> clip(x, repr_min, repr_max),
        # which is what the straight-through estimator linearizes.
        rng = np.random.default_rng(11)
        for bits in (2, 4, 8):
            p = make_weight_params(ValueRange(-1.0, 1.0), bits)
            x = rng.uniform(-2.0, 2.0, size=256)
            h = 1e-4
            inside = (np.abs(x - p.repr_min) > 2 * h) & (np.abs(x - p.repr_max) > 2 * h)
            surrogate_lo = np.clip(x - h, p.repr_min, p.repr_max)
            surrogate_hi = np.clip(x + h, p.repr_min, p.repr_max)
            fd = (surrogate_hi - surrogate_lo) / (2 * h)
            np.testing.assert_allclose(ste_mask(p, x)[inside], fd[inside], atol=1e-3)


class TestProperties:
    """Vectorized sweeps over random (range, bits, x) cases."""

    def _random_params(self, rng, n):
        cases = []
        for _ in range(n):
            lo = rng.uniform(-10, 5)
            hi = lo + rng.uniform(1e-3, 15)
            bits = int(rng.integers(1, 9))
            vr = ValueRange(lo, hi)
            if rng.random() < 0.5:
                cases.append((make_weight_params(vr, bits), vr))
            else:
                cases.append((make_activation_params(vr, bits), vr))
        return cases

    def test_round_trip_bound_bulk(self):
        rng = np.random.default_rng(123)
        checked = 0
        for p, vr in self._random_params(rng, 400):
            if p.mode == "symmetric_weight":
                half = vr.span / 2
                x = rng.uniform(-half, half, size=256)
            else:
                x = rng.uniform(vr.v_min, vr.v_max, size=256)
            err = np.abs(dequantize_array(p, quantize_array(p, x)) - x)
            assert err.max() <= p.scale / 2 + 1e-9
            checked += x.size
        assert checked >= 100_000

    def test_monotonic(self):
        rng = np.random.default_rng(5)
        for p, vr in self._random_params(rng, 50):
            x = np.sort(rng.uniform(vr.v_min - 1, vr.v_max + 1, size=128))
            q = quantize_array(p, x)
            assert np.all(np.diff(q) >= 0)

    def test_symmetric_zero_fidelity(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            lo = rng.uniform(-10, -0.1)
            hi = rng.uniform(0.1, 10)
            p = make_weight_params(ValueRange(lo, hi), int(rng.integers(1, 9)))
            assert quantize(p, 0.0) == 0
            assert dequantize(p, 0) == 0.0

    def test_asymmetric_endpoint_coverage(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            lo = rng.uniform(-5, -0.01)
            hi = rng.uniform(0.01, 5)
            bits = int(rng.integers(1, 9))
            vr = ValueRange(lo, hi)
            p = make_activation_params(vr, bits)
            exact_z = (1.0 - vr.v_max / vr.span) * (2**bits - 1)
            if abs(p.zero_point - exact_z) < 0.5:
                assert quantize(p, vr.v_min) == 0
                assert quantize(p, vr.v_max) == 2**bits - 1
            else:
                assert abs(quantize(p, vr.v_min) - 0) <= 1
                assert abs(quantize(p, vr.v_max) - (2**bits - 1)) <= 1

    def test_scale_shrinks_with_bits(self):
        vr = ValueRange(-3.0, 5.0)
        scales = [make_weight_params(vr, b).scale for b in range(1, 9)]
        assert all(b < a for a, b in zip(scales, scales[1:]))
