"""
Integer-only compute kernels
Linear, addition, matmul with address-mapped transpose, dual-LUT softmax
with a radix-2 non-restoring divider, folded BatchNorm, GAP, ReLU and the
positional-encoding table
"""

import math
import logging
from dataclasses import dataclass

import numpy as np

from .errors import KernelError
from .qcore import (
    FixedScale,
    IntTensor,
    Observer,
    QParams,
    calibrate,
    clamp_bits,
    int_range,
    quantize,
    approx_mul,
    round_half_away,
)

logger = logging.getLogger(__name__)

EXP_ARGUMENTS = ('scaled', 'raw')
SOFTMAX_POLICIES = ('fit', 'shared')

DIVIDER_WIDTH = 48
INT32_RANGE = int_range(32)


def _frozen_int_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.int64)
    arr.setflags(write=False)
    return arr


def _check_int32(values: np.ndarray, name: str) -> None:
    lo, hi = INT32_RANGE
    if values.size and (values.min() < lo or values.max() > hi):
        raise KernelError(f"{name} does not fit in 32-bit signed integers")


def _check_qparams(x: IntTensor, expected: QParams, kernel: str) -> None:
    if x.qparams != expected:
        raise KernelError(f"{kernel}: input qparams {x.qparams} do not match expected {expected}")


@dataclass(frozen=True, eq=False)
class LinearParams:
    """Quantized weights (out_dim x in_dim), int32 biases at S_W*S_X and the S_W*S_X/S_A requantizer"""
    weights: IntTensor
    bias_q: np.ndarray
    requant: FixedScale
    in_qp: QParams
    out_qp: QParams

    def __post_init__(self):
        bias = _frozen_int_array(self.bias_q)
        object.__setattr__(self, 'bias_q', bias)
        if len(self.weights.shape) != 2:
            raise KernelError(f"linear weights must be 2-D, got shape {self.weights.shape}")
        if bias.shape != (self.weights.shape[0],):
            raise KernelError(f"bias length {bias.shape} does not match out_dim {self.weights.shape[0]}")
        _check_int32(bias, 'bias_q')

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True, eq=False)
class SoftmaxTables:
    """
    Numerator (3b-bit) and denominator (2b-bit) exponential tables

    Entry i holds the value for the shifted input X̂ = i - (2^b - 1), so
    both tables ascend towards X̂ = 0. DLUT carries the zero point Z_E.
    """
    nlut: np.ndarray
    dlut: np.ndarray
    z_e: int
    s_e: float
    in_qp: QParams
    out_qp: QParams
    n: int
    h: int = 1
    exp_argument: str = 'scaled'
    policy: str = 'fit'

    def __post_init__(self):
        b = self.in_qp.bitwidth
        nlut = _frozen_int_array(self.nlut)
        dlut = _frozen_int_array(self.dlut)
        object.__setattr__(self, 'nlut', nlut)
        object.__setattr__(self, 'dlut', dlut)
        object.__setattr__(self, 'z_e', int(self.z_e))

        depth = 1 << b
        if nlut.shape != (depth,) or dlut.shape != (depth,):
            raise KernelError(f"softmax tables must hold {depth} entries for b={b}")
        for table, bits, name in ((nlut, 3 * b, 'NLUT'), (dlut, 2 * b, 'DLUT')):
            lo, hi = int_range(bits)
            if table.min() < lo or table.max() > hi:
                raise KernelError(f"{name} entries exceed the {bits}-bit range")
            if np.any(np.diff(table) < 0):
                raise KernelError(f"{name} must be non-decreasing")

    @property
    def bitwidth(self) -> int:
        return self.in_qp.bitwidth

    @property
    def offset(self) -> int:
        """Index of X̂ = 0"""
        return (1 << self.bitwidth) - 1


def int_linear(x: IntTensor, p: LinearParams) -> IntTensor:
    """
    Integer linear layer

    Per output element acc = sum_k (W_q - Z_W)(x_q - Z_X) + bias_q, then
    out = clamp(approx_mul(acc, requant) + Z_A). Rows are processed one at a time.
    """
    _check_qparams(x, p.in_qp, 'int_linear')
    if len(x.shape) != 2 or x.shape[1] != p.in_dim:
        raise KernelError(f"int_linear: input shape {x.shape} does not match in_dim {p.in_dim}")

    centered_w = p.weights.data - p.weights.qparams.zero_point
    z_x = x.qparams.zero_point
    out = np.empty((x.shape[0], p.out_dim), dtype=np.int64)
    for i in range(x.shape[0]):
        acc = centered_w @ (x.data[i] - z_x) + p.bias_q
        out[i] = approx_mul(acc, p.requant) + p.out_qp.zero_point

    return IntTensor(clamp_bits(out, p.out_qp.bitwidth), p.out_qp)


def int_add(a1: IntTensor, a2: IntTensor, fs1: FixedScale, fs2: FixedScale, out_qp: QParams) -> IntTensor:
    """Elementwise approx_mul(a1 - Z1, fs1) + approx_mul(a2 - Z2, fs2) + Z3, clamped"""
    if a1.shape != a2.shape:
        raise KernelError(f"int_add: shape mismatch {a1.shape} vs {a2.shape}")

    lhs = approx_mul(a1.data - a1.qparams.zero_point, fs1)
    rhs = approx_mul(a2.data - a2.qparams.zero_point, fs2)
    return IntTensor(clamp_bits(lhs + rhs + out_qp.zero_point, out_qp.bitwidth), out_qp)


def int_matmul(a1: IntTensor, a2: IntTensor, transpose_a2: bool, fs: FixedScale, out_qp: QParams) -> IntTensor:
    """
    Integer matmul out = clamp(approx_mul((a1 - Z1) @ a2read, fs) + Z3)

    With transpose_a2 the second operand is addressed as a2(j, k) in place
    of a2(k, j); a2 is always read in its stored (row-major) layout.
    """
    if len(a1.shape) != 2 or len(a2.shape) != 2:
        raise KernelError(f"int_matmul: operands must be 2-D, got {a1.shape} and {a2.shape}")

    rows, inner = a1.shape
    a2_inner = a2.shape[1] if transpose_a2 else a2.shape[0]
    if inner != a2_inner:
        raise KernelError(
            f"int_matmul: inner dimension mismatch {a1.shape} x {a2.shape} (transpose_a2={transpose_a2})"
        )
    cols = a2.shape[0] if transpose_a2 else a2.shape[1]

    centered = a2.data - a2.qparams.zero_point
    z1 = a1.qparams.zero_point
    out = np.empty((rows, cols), dtype=np.int64)
    for i in range(rows):
        row = a1.data[i] - z1
        # address mapping: contract over a2's column axis instead of its row axis
        acc = centered @ row if transpose_a2 else row @ centered
        out[i] = approx_mul(acc, fs) + out_qp.zero_point

    return IntTensor(clamp_bits(out, out_qp.bitwidth), out_qp)


def _exp_table(in_qp: QParams, exp_argument: str) -> np.ndarray:
    b = in_qp.bitwidth
    x_hat = np.arange(-((1 << b) - 1), 1, dtype=np.float64)
    if exp_argument == 'scaled':
        return np.exp(in_qp.scale * x_hat)
    return np.exp(x_hat)


def build_softmax_tables(
    in_qp: QParams,
    out_qp: QParams,
    n: int,
    h: int = 1,
    exp_argument: str = 'scaled',
    policy: str = 'fit',
) -> SoftmaxTables:
    """
    Build NLUT/DLUT for the integer softmax

    Args:
        in_qp: qparams of the attention score edge
        out_qp: qparams of the softmax output edge (S_A, Z_A)
        n: sequence length (row length)
        h: head count
        exp_argument: 'scaled' uses exp(S_in * X̂), 'raw' uses exp(X̂)
        policy: 'shared' sizes S_E for n^2*h summands; 'fit' uses the
            finest S_E for which both tables hold E in (0, 1] unsaturated

    Returns:
        SoftmaxTables with DLUT = clamp(round(E/S_E) + Z_E),
        NLUT = clamp(round(E/(S_E*S_A)))
    """
    b = in_qp.bitwidth
    if out_qp.bitwidth != b:
        raise KernelError(f"softmax in/out bitwidths differ: {b} vs {out_qp.bitwidth}")
    if exp_argument not in EXP_ARGUMENTS:
        raise KernelError(f"exp_argument must be one of {EXP_ARGUMENTS}, got {exp_argument!r}")
    if policy not in SOFTMAX_POLICIES:
        raise KernelError(f"softmax policy must be one of {SOFTMAX_POLICIES}, got {policy!r}")
    if n < 1 or h < 1:
        raise KernelError(f"softmax needs n >= 1 and h >= 1, got n={n}, h={h}")

    d_lo, d_hi = int_range(2 * b)
    n_lo, n_hi = int_range(3 * b)
    if policy == 'shared':
        s_e = (n * n * h) / ((1 << (2 * b)) - 1)
        z_e = clamp_bits(round_half_away((1 << (2 * b - 1)) - 1.0 / s_e), 2 * b)
    else:
        inv_s_e = max(1, min(d_hi, math.floor(n_hi * out_qp.scale)))
        s_e = 1.0 / inv_s_e
        z_e = 0

    e = _exp_table(in_qp, exp_argument)
    dlut_raw = round_half_away(e / s_e) + z_e
    nlut_raw = round_half_away(e / (s_e * out_qp.scale))
    if nlut_raw.max() > n_hi or dlut_raw.max() > d_hi:
        logger.warning(f"Softmax tables saturate at b={b}, n={n}, policy={policy}")

    tables = SoftmaxTables(
        nlut=np.clip(nlut_raw, n_lo, n_hi),
        dlut=np.clip(dlut_raw, d_lo, d_hi),
        z_e=z_e,
        s_e=s_e,
        in_qp=in_qp,
        out_qp=out_qp,
        n=n,
        h=h,
        exp_argument=exp_argument,
        policy=policy,
    )
    logger.debug(f"Softmax tables: b={b}, n={n}, S_E={s_e!r}, Z_E={z_e}, DLUT(0)={tables.dlut[-1]}")
    return tables


def nonrestoring_div(num: int, den: int, width: int = DIVIDER_WIDTH) -> int:
    """
    Radix-2 non-restoring division, truncated toward zero

    The recurrence runs on magnitudes; the quotient takes the sign of num.
    Leading zero bits of the dividend are skipped since they leave the
    partial remainder at zero.
    """
    num = int(num)
    den = int(den)
    if den <= 0:
        raise KernelError(f"divisor must be positive, got {den}")
    limit = 1 << (width - 1)
    if not -limit <= num < limit:
        raise KernelError(f"dividend {num} does not fit a {width}-bit signed register")

    magnitude = abs(num)
    remainder = 0
    quotient = 0
    for i in range(magnitude.bit_length() - 1, -1, -1):
        bit = (magnitude >> i) & 1
        if remainder >= 0:
            remainder = (remainder << 1) + bit - den
        else:
            remainder = (remainder << 1) + bit + den
        quotient = (quotient << 1) | (1 if remainder >= 0 else 0)

    return -quotient if num < 0 else quotient


def int_softmax(x: IntTensor, t: SoftmaxTables) -> IntTensor:
    """
    Row-wise integer softmax

    For each row: subtract the row maximum, look up numerators in NLUT,
    accumulate DLUT - Z_E, then divide every numerator by the row sum
    and add Z_A.
    """
    if len(x.shape) != 2 or x.shape[0] != x.shape[1]:
        raise KernelError(f"int_softmax expects a square input, got {x.shape}")
    if x.shape[0] != t.n:
        raise KernelError(f"int_softmax: tables built for n={t.n}, input has n={x.shape[0]}")
    _check_qparams(x, t.in_qp, 'int_softmax')

    z_a = t.out_qp.zero_point
    out = np.empty(x.shape, dtype=np.int64)
    for i in range(x.shape[0]):
        row = x.data[i]
        index = row - row.max() + t.offset
        numerators = t.nlut[index]
        total = int(np.sum(t.dlut[index] - t.z_e))
        if total <= 0:
            raise KernelError(f"softmax row {i} has a non-positive denominator sum {total}")
        for j, numerator in enumerate(numerators):
            out[i, j] = nonrestoring_div(int(numerator), total) + z_a

    return IntTensor(clamp_bits(out, t.out_qp.bitwidth), t.out_qp)


def fold_batchnorm(gamma, beta, mu, sigma2, eps: float):
    """
    Fold BatchNorm statistics into a per-feature affine

    gamma_hat = gamma / sqrt(sigma2 + eps), beta_hat = beta - gamma_hat * mu
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if not (gamma.shape == beta.shape == mu.shape == sigma2.shape):
        raise KernelError("BatchNorm vectors must share one shape")
    if np.any(sigma2 < 0):
        raise KernelError("BatchNorm variance must be non-negative")
    if not eps > 0:
        raise KernelError(f"BatchNorm eps must be positive, got {eps}")

    gamma_hat = gamma / np.sqrt(sigma2 + eps)
    beta_hat = beta - gamma_hat * mu
    return gamma_hat, beta_hat


@dataclass(frozen=True, eq=False)
class BatchNormParams:
    """Folded BatchNorm: quantized gamma_hat, int32 offsets at S_gamma*S_X and the requantizer"""
    gamma_hat_q: IntTensor
    beta_star_q: np.ndarray
    requant: FixedScale
    in_qp: QParams
    out_qp: QParams

    def __post_init__(self):
        beta = _frozen_int_array(self.beta_star_q)
        object.__setattr__(self, 'beta_star_q', beta)
        if len(self.gamma_hat_q.shape) != 1 or beta.shape != self.gamma_hat_q.shape:
            raise KernelError("gamma_hat_q and beta_star_q must be vectors of one length")
        _check_int32(beta, 'beta_star_q')

    @property
    def d_model(self) -> int:
        return self.gamma_hat_q.shape[0]


def int_batchnorm(x: IntTensor, p: BatchNormParams) -> IntTensor:
    """out = clamp(approx_mul((g_q - Z_g)(x_q - Z_X) + beta*_q, requant) + Z_A)"""
    if len(x.shape) != 2 or x.shape[1] != p.d_model:
        raise KernelError(f"int_batchnorm: input shape {x.shape} does not match d_model {p.d_model}")
    _check_qparams(x, p.in_qp, 'int_batchnorm')

    gamma = p.gamma_hat_q.data - p.gamma_hat_q.qparams.zero_point
    acc = gamma[np.newaxis, :] * (x.data - x.qparams.zero_point) + p.beta_star_q[np.newaxis, :]
    out = approx_mul(acc, p.requant) + p.out_qp.zero_point
    return IntTensor(clamp_bits(out, p.out_qp.bitwidth), p.out_qp)


def int_gap(x: IntTensor, fs: FixedScale, out_qp: QParams) -> IntTensor:
    """Column sums of (x - Z_X) scaled by S_X/(S_A*n), shape (1, d_model)"""
    if len(x.shape) != 2:
        raise KernelError(f"int_gap expects a 2-D input, got {x.shape}")
    sums = np.sum(x.data - x.qparams.zero_point, axis=0, keepdims=True)
    out = approx_mul(sums, fs) + out_qp.zero_point
    return IntTensor(clamp_bits(out, out_qp.bitwidth), out_qp)


def int_relu(x: IntTensor) -> IntTensor:
    """max(x_q, Z_X) with qparams passed through"""
    return IntTensor(np.maximum(x.data, x.qparams.zero_point), x.qparams)


@dataclass(frozen=True, eq=False)
class PETable:
    table: IntTensor

    @property
    def qparams(self) -> QParams:
        return self.table.qparams


def sinusoidal_encoding(n: int, d_model: int) -> np.ndarray:
    """PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(same angle)"""
    positions = np.arange(n, dtype=np.float64)[:, np.newaxis]
    columns = np.arange(d_model)
    exponents = (2 * (columns // 2)).astype(np.float64) / d_model
    angles = positions / np.power(10000.0, exponents)[np.newaxis, :]
    return np.where(columns % 2 == 0, np.sin(angles), np.cos(angles))


def build_pe_table(n: int, d_model: int, bitwidth: int, qp: QParams = None) -> PETable:
    """Quantized sinusoidal positional-encoding table; qp defaults to the table's own min/max"""
    if n < 1 or d_model < 1:
        raise KernelError(f"PE table needs n >= 1 and d_model >= 1, got {n}x{d_model}")
    values = sinusoidal_encoding(n, d_model)
    if qp is None:
        qp = calibrate(Observer.from_values(values), bitwidth)
    elif qp.bitwidth != bitwidth:
        raise KernelError(f"PE qparams bitwidth {qp.bitwidth} does not match b={bitwidth}")
    return PETable(quantize(values, qp))
