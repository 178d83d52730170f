"""Exceptions raised by the envfield toolkit."""


class EnvFieldError(Exception):
    """Base class for every error raised by envfield."""


class ImpossibleConfigurationError(EnvFieldError):
    """Raised when a requested environment cannot be generated."""


class OutOfBoundsError(EnvFieldError):
    """Raised when a grid position lies outside the grid."""


class GoalOnObstacleError(EnvFieldError):
    """Raised when an oracle or planner is given a goal that is not accessible."""


class PreconditionError(EnvFieldError):
    """Raised when an operation's documented precondition is violated."""


class ShapeMismatchError(EnvFieldError):
    """Raised when tensor or parameter shapes are incompatible."""


class NonFiniteError(EnvFieldError):
    """Raised when a NaN or infinite value appears in a network computation."""


class TapeReuseError(EnvFieldError):
    """Raised when a recorded forward tape is consumed twice."""


class DivergenceError(EnvFieldError):
    """Raised when a training loss becomes non-finite."""


class ArityMismatchError(EnvFieldError):
    """Raised when a field query does not match the model variant's inputs."""


class EmptyDatasetError(EnvFieldError):
    """Raised when training data is empty or inconsistent."""


class DegenerateSceneError(EnvFieldError):
    """Raised when a scene description is geometrically invalid."""


class EmptyRegionError(EnvFieldError):
    """Raised when an accessible region holds no points."""


class ConfigError(EnvFieldError):
    """Raised when a run configuration is invalid."""


class CheckpointError(EnvFieldError):
    """Raised when a file cannot be parsed in its expected format."""


class BenchError(EnvFieldError):
    """Raised when a benchmark is misconfigured or a measured property fails."""
