"""Adaptive spatial feature fusion on residual CNN backbones."""

from asffnet.errors import (
    AlignmentError,
    AsffError,
    CheckpointError,
    ConfigurationError,
    ShapeError,
    TrainingError,
    ValidationError,
    WeightValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "AsffError",
    "CheckpointError",
    "ConfigurationError",
    "ShapeError",
    "TrainingError",
    "ValidationError",
    "WeightValidationError",
]
