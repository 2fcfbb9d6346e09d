"""Linear quantization of weights, activations, and hash-table features.

Weights (and hash features) use symmetric quantization centered at zero;
activations use asymmetric quantization with a rounded zero point. All
rounding is half-away-from-zero so that results are deterministic and
independent of platform tie-breaking.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

MODE_SYMMETRIC = "symmetric_weight"
MODE_ASYMMETRIC = "asymmetric_activation"

# Widening applied to a degenerate (zero-width) calibration range.
DEGENERATE_RANGE_EPS = 1e-6

BITS_MIN = 1
BITS_MAX = 8


class CalibrationError(ValueError):
    """Raised when a value range cannot be calibrated from the given samples."""


def round_half_away(x):
    """Round to nearest integer with ties going away from zero.

    Works on scalars and arrays; returns the same kind as the input.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.floor(np.abs(x) + 0.5)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class ValueRange:
    """Calibrated value range [v_min, v_max]."""

    v_min: float
    v_max: float

    def __post_init__(self):
        if not (math.isfinite(self.v_min) and math.isfinite(self.v_max)):
            raise ValueError("value range bounds must be finite")
        if self.v_min > self.v_max:
            raise ValueError(f"v_min {self.v_min} exceeds v_max {self.v_max}")

    @property
    def span(self) -> float:
        return self.v_max - self.v_min


@dataclass(frozen=True)
class QuantParams:
    """Scale, zero point, and clip bounds for one tensor at a given bit width."""

    bits: int
    scale: float
    zero_point: int
    q_min: int
    q_max: int
    mode: str

    def __post_init__(self):
        if not BITS_MIN <= self.bits <= BITS_MAX:
            raise ValueError(f"bits must be in [{BITS_MIN}, {BITS_MAX}], got {self.bits}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.q_min >= self.q_max:
            raise ValueError("q_min must be below q_max")
        if self.mode == MODE_ASYMMETRIC:
            if self.q_min != 0 or self.q_max != 2**self.bits - 1:
                raise ValueError("asymmetric bounds must be [0, 2^bits - 1]")
            if not 0 <= self.zero_point <= self.q_max:
                raise ValueError("asymmetric zero point out of code range")
        elif self.mode == MODE_SYMMETRIC:
            if self.zero_point != 0:
                raise ValueError("symmetric zero point must be 0")
        else:
            raise ValueError(f"unknown quantization mode {self.mode!r}")

    @property
    def repr_min(self) -> float:
        """Smallest representable real value."""
        return (self.q_min - self.zero_point) * self.scale

    @property
    def repr_max(self) -> float:
        """Largest representable real value."""
        return (self.q_max - self.zero_point) * self.scale

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "scale": self.scale,
            "zero_point": self.zero_point,
            "q_min": self.q_min,
            "q_max": self.q_max,
            "mode": self.mode,
        }


def calibrate_range(samples, percentile: float = 1.0) -> ValueRange:
    """Determine a value range from observed samples.

    percentile = 1.0 returns the exact min/max. Otherwise the range is
    clipped symmetrically: the lower bound at quantile (1-percentile)/2 and
    the upper bound at 1 - (1-percentile)/2. A zero-width result is widened
    by +-1e-6 so the derived scale is never zero.
    """
    arr = np.asarray(samples, dtype=np.float64).ravel()
    if arr.size == 0:
        raise CalibrationError("cannot calibrate from an empty sample set")
    if not np.all(np.isfinite(arr)):
        raise CalibrationError("calibration samples must be finite")
    if not 0.0 < percentile <= 1.0:
        raise ValueError(f"percentile must be in (0, 1], got {percentile}")

    if percentile >= 1.0:
        lo = float(arr.min())
        hi = float(arr.max())
    else:
        tail = (1.0 - percentile) / 2.0
        lo, hi = (float(q) for q in np.quantile(arr, [tail, 1.0 - tail]))

    if lo == hi:
        logger.warning("degenerate calibration range at %g; widening by %g", lo, DEGENERATE_RANGE_EPS)
        lo -= DEGENERATE_RANGE_EPS
        hi += DEGENERATE_RANGE_EPS
    return ValueRange(lo, hi)


def _check_bits(bits: int) -> None:
    if not BITS_MIN <= bits <= BITS_MAX:
        raise ValueError(f"bits must be in [{BITS_MIN}, {BITS_MAX}], got {bits}")


def make_weight_params(value_range: ValueRange, bits: int, literal_bounds: bool = False) -> QuantParams:
    """Symmetric quantization parameters for a weight-like tensor.

    scale = range span / (2^bits - 1), zero point pinned at 0. Clip bounds
    are +-(2^(bits-1) - 1); 1-bit collapses to {-1, 0, 1}. literal_bounds
    selects q_min = -2^(bits-1) - 1 instead, which over-reaches the b-bit
    code capacity and exists only for fidelity experiments.
    """
    _check_bits(bits)
    if value_range.span <= 0:
        raise ValueError("value range has zero width; calibrate first")
    scale = value_range.span / (2**bits - 1)
    if bits == 1:
        q_min, q_max = -1, 1
    elif literal_bounds:
        q_min, q_max = -(2 ** (bits - 1)) - 1, 2 ** (bits - 1) - 1
    else:
        q_max = 2 ** (bits - 1) - 1
        q_min = -q_max
    return QuantParams(bits=bits, scale=scale, zero_point=0, q_min=q_min, q_max=q_max, mode=MODE_SYMMETRIC)


def make_activation_params(value_range: ValueRange, bits: int) -> QuantParams:
    """Asymmetric quantization parameters for an activation-like tensor.

    Z = round[(1 - v_max / span) * (2^bits - 1)]. The range is first widened
    to include zero so that Z always lands inside the code range and 0.0 is
    exactly representable; ranges that already straddle zero are unchanged.
    """
    _check_bits(bits)
    v_min = min(value_range.v_min, 0.0)
    v_max = max(value_range.v_max, 0.0)
    span = v_max - v_min
    if span <= 0:
        raise ValueError("value range has zero width; calibrate first")
    levels = 2**bits - 1
    scale = span / levels
    zero_point = int(round_half_away((1.0 - v_max / span) * levels))
    zero_point = min(max(zero_point, 0), levels)
    return QuantParams(bits=bits, scale=scale, zero_point=zero_point, q_min=0, q_max=levels, mode=MODE_ASYMMETRIC)


def quantize(params: QuantParams, x: float) -> int:
    """Map a real value to its integer code."""
    if not math.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x}")
    if params.mode == MODE_SYMMETRIC:
        q = round_half_away(x / params.scale)
    else:
        q = round_half_away(x / params.scale + params.zero_point)
    return int(min(max(q, params.q_min), params.q_max))


def dequantize(params: QuantParams, q: int) -> float:
    """Map an integer code back to its real value."""
    if not params.q_min <= q <= params.q_max:
        raise ValueError(f"code {q} outside clip bounds [{params.q_min}, {params.q_max}]")
    return (q - params.zero_point) * params.scale


def quantize_array(params: QuantParams, x: np.ndarray) -> np.ndarray:
    """Vectorized quantize; returns int64 codes."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    q = round_half_away(x / params.scale + params.zero_point)
    return np.clip(q, params.q_min, params.q_max).astype(np.int64)


def dequantize_array(params: QuantParams, q: np.ndarray) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) - params.zero_point) * params.scale


def fake_quantize(params: QuantParams, x):
    """Quantize-then-dequantize, elementwise. Accepts scalars or arrays.

    The training-time gradient of this op is the straight-through estimator:
    1 inside [repr_min, repr_max] and 0 outside (see ste_mask).
    """
    scalar = np.isscalar(x) or (isinstance(x, np.ndarray) and x.ndim == 0)
    out = dequantize_array(params, quantize_array(params, np.atleast_1d(x)))
    if scalar:
        return float(out[0])
    return out


def ste_mask(params: QuantParams, x: np.ndarray) -> np.ndarray:
    """Straight-through gradient of fake_quantize: 1 inside the representable
    range, 0 outside."""
    x = np.asarray(x, dtype=np.float64)
    return ((x >= params.repr_min) & (x <= params.repr_max)).astype(np.float64)
