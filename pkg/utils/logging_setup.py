"""
Logging setup for the intq command line and library
Console output always, a rotating log file only when LOG_TO_FILE is set
"""

import logging
import logging.handlers
from typing import Optional

from config import get_service_log_path, get_logging_config


def setup_service_logging(
    service_name: str,
    logger_name: Optional[str] = None,
    log_level: Optional[str] = None
) -> logging.Logger:
    """
    Set up logging for a service

    Args:
        service_name: Name of the service (e.g., 'intq', 'general')
        logger_name: Name for the logger (defaults to service_name)
        log_level: Log level override (defaults to config level)

    Returns:
        Configured logger instance
    """
    config = get_logging_config()
    level = getattr(logging, (log_level or config.level).upper())
    logger_name = logger_name or service_name

    logger = logging.getLogger(logger_name)
    logger.setLevel(level)

    # Clear existing handlers to avoid duplicates
    logger.handlers.clear()

    formatter = logging.Formatter(config.format)

    if config.to_file:
        log_path = get_service_log_path(service_name)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        service_config = config.services.get(service_name, config.services['general'])
        file_handler = logging.handlers.RotatingFileHandler(
            log_path,
            maxBytes=service_config.max_bytes,
            backupCount=service_config.backup_count
        )
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    # stderr keeps stdout free for the report
    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    logger.propagate = False

    return logger


def get_service_logger(service_name: str) -> logging.Logger:
    """Get a logger for a service, setting it up on first use"""
    logger = logging.getLogger(service_name)
    if not logger.handlers:
        logger = setup_service_logging(service_name)
    return logger


def setup_general_logging() -> logging.Logger:
    """Set up general logging"""
    return setup_service_logging('general')
