"""Utilities package"""

from .logger import setup_logger, logger
from .errors import (
    RvaeError,
    DimensionError,
    DomainError,
    FormatError,
    IdxLengthError,
    CheckpointError,
    ConfigurationError,
    TrainingDivergenceError,
    GradientCheckError,
    SweepFailedError,
)

__all__ = [
    'setup_logger',
    'logger',
    'RvaeError',
    'DimensionError',
    'DomainError',
    'FormatError',
    'IdxLengthError',
    'CheckpointError',
    'ConfigurationError',
    'TrainingDivergenceError',
    'GradientCheckError',
    'SweepFailedError',
]
