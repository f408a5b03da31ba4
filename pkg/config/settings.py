"""
Configuration for the integer-only Transformer engine
Values come from environment variables (optionally loaded from a .env file)
"""

import os
import logging
from pathlib import Path
from typing import Dict, Optional

from int_transformer.errors import ConfigError
from int_transformer.kernels import EXP_ARGUMENTS, SOFTMAX_POLICIES

logger = logging.getLogger(__name__)

_DOTENV_LOADED = False


def load_environment(env_file: Optional[str] = None) -> None:
    """Load a .env file once per process (python-dotenv is optional at runtime)"""
    global _DOTENV_LOADED
    if _DOTENV_LOADED and env_file is None:
        return
    try:
        from dotenv import load_dotenv
    except ImportError:
        logger.debug("python-dotenv not installed, skipping .env loading")
        _DOTENV_LOADED = True
        return

    if env_file:
        load_dotenv(env_file)
    else:
        load_dotenv()
    _DOTENV_LOADED = True


def _env_bool(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ('1', 'true', 'yes', 'on')


class ServiceLogConfig:
    """Rotation settings for one service's log file"""

    def __init__(self, max_bytes: int, backup_count: int):
        self.max_bytes = max_bytes
        self.backup_count = backup_count


class LoggingConfig:
    """Logging configuration loaded from environment variables"""

    def __init__(self):
        self.level = os.getenv('LOG_LEVEL', 'INFO').upper()
        self.format = os.getenv('LOG_FORMAT', '%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        self.log_dir = Path(os.getenv('LOG_DIR', 'logs'))
        self.to_file = _env_bool('LOG_TO_FILE', 'false')
        self.max_bytes = int(os.getenv('LOG_MAX_BYTES', str(5 * 1024 * 1024)))
        self.backup_count = int(os.getenv('LOG_BACKUP_COUNT', '3'))

        if self.level not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ConfigError(f"LOG_LEVEL must be a logging level name, got {self.level!r}")

        self.services: Dict[str, ServiceLogConfig] = {
            'intq': ServiceLogConfig(
                int(os.getenv('INTQ_LOG_MAX_BYTES', str(self.max_bytes))),
                int(os.getenv('INTQ_LOG_BACKUP_COUNT', str(self.backup_count))),
            ),
            'general': ServiceLogConfig(self.max_bytes, self.backup_count),
        }


class EngineConfig:
    """Numeric engine configuration loaded from environment variables"""

    def __init__(self):
        # FixedScale multiplier width w
        self.scale_width = int(os.getenv('INTQ_SCALE_WIDTH', '16'))
        # exp() argument for the softmax tables
        self.exp_argument = os.getenv('INTQ_EXP_ARGUMENT', 'scaled').strip().lower()
        # how S_E is chosen for the softmax tables
        self.softmax_policy = os.getenv('INTQ_SOFTMAX_POLICY', 'fit').strip().lower()
        # random calibration batch used by seeded verification runs
        self.calibration_samples = int(os.getenv('INTQ_CALIBRATION_SAMPLES', '8'))
        self.verify_workers = int(os.getenv('INTQ_VERIFY_WORKERS', '1'))

        if not 8 <= self.scale_width <= 32:
            raise ConfigError(f"INTQ_SCALE_WIDTH must be in [8, 32], got {self.scale_width}")
        if self.exp_argument not in EXP_ARGUMENTS:
            raise ConfigError(f"INTQ_EXP_ARGUMENT must be one of {EXP_ARGUMENTS}, got {self.exp_argument!r}")
        if self.softmax_policy not in SOFTMAX_POLICIES:
            raise ConfigError(f"INTQ_SOFTMAX_POLICY must be one of {SOFTMAX_POLICIES}, got {self.softmax_policy!r}")
        if self.calibration_samples < 1:
            raise ConfigError("INTQ_CALIBRATION_SAMPLES must be at least 1")
        if self.verify_workers < 1:
            raise ConfigError("INTQ_VERIFY_WORKERS must be at least 1")

        logger.debug(
            f"Engine configuration: w={self.scale_width}, exp={self.exp_argument}, "
            f"softmax_policy={self.softmax_policy}, calibration_samples={self.calibration_samples}"
        )


def get_logging_config() -> LoggingConfig:
    """Get the logging configuration"""
    load_environment()
    return LoggingConfig()


def get_service_log_path(service_name: str) -> Path:
    """Get the log file path for a service"""
    return get_logging_config().log_dir / f"{service_name}.log"


def get_engine_config() -> EngineConfig:
    """Get the engine configuration"""
    load_environment()
    return EngineConfig()
