"""
Integer-only time-series Transformer engine
Bit-exact software twin of a single-layer, single-head encoder accelerator
"""

from .errors import (
    ArtifactError,
    CalibrationError,
    ConfigError,
    DataIOError,
    ForwardError,
    HwExportError,
    IntTransformerError,
    KernelError,
    QuantizationError,
)
from .qcore import (
    FixedScale,
    IntTensor,
    Observer,
    QParams,
    approx_mul,
    calibrate,
    dequantize,
    derive_fixed_scale,
    quantize,
)
from .model import ModelConfig, QuantizedModel, assemble, forward, param_breakdown, param_count, run_edges
from .reference import FloatModel, calibrate_model, float_forward, sim_quant_forward

__all__ = [
    'ArtifactError',
    'CalibrationError',
    'ConfigError',
    'DataIOError',
    'ForwardError',
    'HwExportError',
    'IntTransformerError',
    'KernelError',
    'QuantizationError',
    'FixedScale',
    'IntTensor',
    'Observer',
    'QParams',
    'approx_mul',
    'calibrate',
    'dequantize',
    'derive_fixed_scale',
    'quantize',
    'ModelConfig',
    'QuantizedModel',
    'assemble',
    'forward',
    'param_breakdown',
    'param_count',
    'run_edges',
    'FloatModel',
    'calibrate_model',
    'float_forward',
    'sim_quant_forward',
]
