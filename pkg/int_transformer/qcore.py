"""
Quantization core
Numeric types, min-max calibration, quantize/dequantize and the dyadic
(M, n) requantization multipliers shared by every integer kernel
"""

import math
import logging
from dataclasses import dataclass
from typing import Iterable, Tuple, Union

import numpy as np

from .errors import QuantizationError, CalibrationError

logger = logging.getLogger(__name__)

SUPPORTED_BITWIDTHS = (4, 6, 8)
DEFAULT_SCALE_WIDTH = 16

ArrayLike = Union[float, int, Iterable, np.ndarray]


def int_range(bits: int) -> Tuple[int, int]:
    """Signed two's-complement range of a `bits`-wide integer"""
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def clamp_bits(values, bits: int):
    """Clamp integers to the signed `bits`-wide range"""
    lo, hi = int_range(bits)
    if isinstance(values, (int, np.integer)):
        return int(min(max(int(values), lo), hi))
    return np.clip(np.asarray(values, dtype=np.int64), lo, hi)


def round_half_away(values):
    """
    Round to nearest, ties away from zero

    Returns a Python int for scalars and an int64 array otherwise.
    """
    arr = np.asarray(values, dtype=np.float64)
    mag = np.abs(arr)
    whole = np.floor(mag)
    # mag + 0.5 is inexact just below a tie; compare the fractional part instead
    rounded = np.sign(arr) * (whole + (mag - whole >= 0.5))
    if rounded.ndim == 0:
        return int(rounded)
    return rounded.astype(np.int64)


@dataclass(frozen=True)
class QParams:
    """Per-tensor quantization parameters (S, Z, b)"""
    scale: float
    zero_point: int
    bitwidth: int
    constant: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'scale', float(self.scale))
        object.__setattr__(self, 'zero_point', int(self.zero_point))
        object.__setattr__(self, 'bitwidth', int(self.bitwidth))
        object.__setattr__(self, 'constant', bool(self.constant))

        if self.bitwidth not in SUPPORTED_BITWIDTHS:
            raise QuantizationError(f"bitwidth must be one of {SUPPORTED_BITWIDTHS}, got {self.bitwidth}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise QuantizationError(f"scale must be a positive finite number, got {self.scale}")
        lo, hi = int_range(self.bitwidth)
        if not lo <= self.zero_point <= hi:
            raise QuantizationError(f"zero point {self.zero_point} outside [{lo}, {hi}] for b={self.bitwidth}")

    @property
    def qmin(self) -> int:
        return int_range(self.bitwidth)[0]

    @property
    def qmax(self) -> int:
        return int_range(self.bitwidth)[1]


@dataclass(frozen=True, eq=False)
class IntTensor:
    """Shaped signed integers (row-major) plus the QParams they are encoded with"""
    data: np.ndarray
    qparams: QParams

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype.kind == 'f':
            raise QuantizationError("IntTensor data must be integers, got a floating-point array")
        arr = np.array(raw, dtype=np.int64)
        lo, hi = int_range(self.qparams.bitwidth)
        if arr.size and (arr.min() < lo or arr.max() > hi):
            raise QuantizationError(
                f"IntTensor values [{arr.min()}, {arr.max()}] exceed the {self.qparams.bitwidth}-bit range"
            )
        arr.setflags(write=False)
        object.__setattr__(self, 'data', arr)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    def with_data(self, data) -> 'IntTensor':
        return IntTensor(data, self.qparams)


@dataclass(frozen=True)
class FixedScale:
    """Dyadic approximation M * 2^-n of a real ratio r"""
    multiplier: int
    shift: int
    ratio: float
    width: int = DEFAULT_SCALE_WIDTH

    def __post_init__(self):
        if not 0 <= self.multiplier < (1 << self.width):
            raise QuantizationError(f"multiplier {self.multiplier} does not fit {self.width} bits")
        if not 0 <= self.shift <= 31:
            raise QuantizationError(f"shift {self.shift} outside [0, 31]")

    @property
    def value(self) -> float:
        return math.ldexp(self.multiplier, -self.shift)


class Observer:
    """Running min/max of every value seen (single writer)"""

    def __init__(self):
        self.running_min = math.inf
        self.running_max = -math.inf
        self.count = 0

    @classmethod
    def from_values(cls, values: ArrayLike) -> 'Observer':
        observer = cls()
        observer.update(values)
        return observer

    @classmethod
    def from_range(cls, minimum: float, maximum: float) -> 'Observer':
        observer = cls()
        observer.update([minimum, maximum])
        return observer

    @property
    def seen(self) -> bool:
        return self.count > 0

    def update(self, values: ArrayLike) -> None:
        arr = np.asarray(values, dtype=np.float64)
        if arr.size == 0:
            return
        if not np.all(np.isfinite(arr)):
            raise CalibrationError("observer received a non-finite value")
        self.running_min = min(self.running_min, float(arr.min()))
        self.running_max = max(self.running_max, float(arr.max()))
        self.count += int(arr.size)

    def including_zero(self) -> 'Observer':
        """Copy whose range is widened to contain 0"""
        widened = Observer()
        widened.running_min = min(self.running_min, 0.0)
        widened.running_max = max(self.running_max, 0.0)
        widened.count = max(self.count, 1)
        return widened

    def __repr__(self) -> str:
        return f"Observer(min={self.running_min!r}, max={self.running_max!r}, count={self.count})"


def calibrate(observer: Observer, bitwidth: int) -> QParams:
    """
    Derive asymmetric QParams from an observed range

    S = (max - min) / (2^b - 1)
    Z = clamp(round((2^(b-1) - 1) - max / S))

    Args:
        observer: Observer that has seen at least one value
        bitwidth: target bitwidth b

    Returns:
        QParams; a degenerate range (min == max) gives S=1, Z=0 flagged constant
    """
    if not observer.seen:
        raise CalibrationError("cannot calibrate an observer that has seen no values")
    if bitwidth not in SUPPORTED_BITWIDTHS:
        raise QuantizationError(f"bitwidth must be one of {SUPPORTED_BITWIDTHS}, got {bitwidth}")

    alpha, beta = observer.running_max, observer.running_min
    if alpha == beta:
        logger.warning(f"Degenerate calibration range [{beta}, {alpha}], using S=1, Z=0")
        return QParams(1.0, 0, bitwidth, constant=True)

    scale = (alpha - beta) / ((1 << bitwidth) - 1)
    _, qmax = int_range(bitwidth)
    # ties to even: a symmetric range lands on Z=0
    zero_point = int(np.rint(qmax - alpha / scale))
    zero_point = clamp_bits(zero_point, bitwidth)
    return QParams(scale, zero_point, bitwidth)


def quantize(x: ArrayLike, qp: QParams) -> IntTensor:
    """Elementwise clamp(round(x / S) + Z) with ties away from zero"""
    arr = np.asarray(x, dtype=np.float64)
    finite = np.isfinite(arr)
    if not np.all(finite):
        index = tuple(int(i) for i in np.argwhere(~finite)[0])
        raise QuantizationError(f"non-finite input at index {index}")
    q = round_half_away(arr / qp.scale) + qp.zero_point
    return IntTensor(clamp_bits(np.asarray(q, dtype=np.int64), qp.bitwidth), qp)


def quantize_bias(values: ArrayLike, scale: float, bits: int = 32) -> np.ndarray:
    """Symmetric (zero point 0) quantization of biases and BN offsets to `bits`-wide integers"""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise QuantizationError("non-finite bias value")
    if not (math.isfinite(scale) and scale > 0):
        raise QuantizationError(f"bias scale must be a positive finite number, got {scale}")
    q = np.asarray(round_half_away(np.atleast_1d(arr / scale)), dtype=np.int64)
    lo, hi = int_range(bits)
    if q.size and (q.min() < lo or q.max() > hi):
        logger.warning(f"Bias values saturated to the {bits}-bit range")
    return np.clip(q, lo, hi).reshape(arr.shape)


def dequantize(xq: IntTensor) -> np.ndarray:
    """Elementwise S * (q - Z)"""
    qp = xq.qparams
    return qp.scale * (xq.data.astype(np.float64) - qp.zero_point)


def derive_fixed_scale(r: float, width: int = DEFAULT_SCALE_WIDTH) -> FixedScale:
    """
    Approximate a positive ratio as M * 2^-n

    n is the largest shift in [0, 31] whose rounded multiplier still fits
    `width` bits, M = round(r * 2^n).
    """
    if not (isinstance(r, (int, float, np.floating)) and math.isfinite(r) and r > 0):
        raise QuantizationError(f"ratio must be a positive finite number, got {r}")
    if not 8 <= width <= 32:
        raise QuantizationError(f"multiplier width must be in [8, 32], got {width}")

    r = float(r)
    limit = (1 << width) - 1
    for shift in range(31, -1, -1):
        scaled = math.ldexp(r, shift)
        if scaled > limit + 1:
            continue
        multiplier = round_half_away(scaled)
        if multiplier <= limit:
            return FixedScale(multiplier, shift, r, width)

    raise QuantizationError(f"ratio {r} out of representable range for a {width}-bit multiplier")


def approx_mul(v, fs: FixedScale):
    """
    Integer-only v * r via (v * M) >> n

    The shift rounds half away from zero: 2^(n-1) is added to the product
    magnitude before shifting and the sign is restored afterwards.
    Products are 64-bit.
    """
    scalar = isinstance(v, (int, np.integer))
    prod = np.asarray(v, dtype=np.int64) * np.int64(fs.multiplier)
    if fs.shift == 0:
        result = prod
    else:
        half = np.int64(1 << (fs.shift - 1))
        magnitude = (np.abs(prod) + half) >> np.int64(fs.shift)
        result = np.where(prod < 0, -magnitude, magnitude)
    if scalar:
        return int(result)
    return np.asarray(result, dtype=np.int64)
