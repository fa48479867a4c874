"""Exception hierarchy shared by every module of the package."""


class CometError(Exception):
    """Base class for all package errors."""


class ValidationError(CometError, ValueError):
    """Input data violates a documented schema or invariant."""


class ConfigError(CometError, ValueError):
    """A configuration value is out of range or inconsistent."""


class ShapeError(CometError, ValueError):
    """Tensor dimensions do not agree."""


class InvalidMaskError(CometError, ValueError):
    """An attention mask blocks every entry of some row."""


class StateError(CometError, RuntimeError):
    """An object is used before it is ready (e.g. Adam without gradients)."""


class CheckpointError(CometError, ValueError):
    """A checkpoint does not match the model it is loaded into."""


class TrainingDiverged(CometError, RuntimeError):
    """The training loss became NaN or infinite."""
