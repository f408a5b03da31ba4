"""
Exception hierarchy for the integer-only Transformer engine
"""


class IntTransformerError(Exception):
    """Base class for every engine error"""


class ConfigError(IntTransformerError, ValueError):
    """Invalid configuration value"""


class QuantizationError(IntTransformerError, ValueError):
    """Invalid quantization parameters, non-finite inputs or unrepresentable ratios"""


class CalibrationError(IntTransformerError, ValueError):
    """Empty calibration batch or missing calibration edge"""


class KernelError(IntTransformerError, ValueError):
    """Shape or quantization-parameter mismatch inside an integer kernel"""


class ForwardError(IntTransformerError):
    """A kernel failure during a forward pass, tagged with the layer name"""

    def __init__(self, layer: str, message: str):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


class DataIOError(IntTransformerError, ValueError):
    """Dataset ingestion, scaling or metric misuse"""


class ArtifactError(IntTransformerError):
    """Model artifact cannot be written or read back exactly"""


class HwExportError(IntTransformerError):
    """Hardware memory files cannot be written"""
