"""
Utility modules for the integer Transformer engine
"""

from .logging_setup import (
    setup_service_logging,
    get_service_logger,
    setup_general_logging,
)

__all__ = [
    'setup_service_logging',
    'get_service_logger',
    'setup_general_logging',
]
