class AsffError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(AsffError, ValueError):
    pass


class AlignmentError(ValidationError):
    """Two feature maps that must share a shape do not."""


class WeightValidationError(ValidationError):
    """Fusion weights violate the simplex / unit-interval constraint."""


class ShapeError(ValidationError):
    pass


class ConfigurationError(AsffError, ValueError):
    pass


class CheckpointError(AsffError):
    pass


class TrainingError(AsffError, RuntimeError):
    pass
