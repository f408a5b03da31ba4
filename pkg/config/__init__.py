"""
Configuration package for the integer-only Transformer engine
"""

from .settings import (
    EXP_ARGUMENTS,
    SOFTMAX_POLICIES,
    EngineConfig,
    LoggingConfig,
    ServiceLogConfig,
    get_engine_config,
    get_logging_config,
    get_service_log_path,
    load_environment,
)

__all__ = [
    'EXP_ARGUMENTS',
    'SOFTMAX_POLICIES',
    'EngineConfig',
    'LoggingConfig',
    'ServiceLogConfig',
    'get_engine_config',
    'get_logging_config',
    'get_service_log_path',
    'load_environment',
]
