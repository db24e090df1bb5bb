class SemanticTrajectoryError(Exception):
    r"""Base class for the errors raised by the package."""


class DegenerateTriangulationError(SemanticTrajectoryError):
    r"""Raised when a correspondence group cannot be triangulated.

    Either fewer than two observations survive RANSAC or every pair of
    observing rays is closer to parallel than the minimum triangulation
    angle.
    """


class UnderdeterminedTransformError(SemanticTrajectoryError):
    r"""Raised when a local rigid transformation cannot be estimated."""


class NoViewError(SemanticTrajectoryError):
    r"""Raised when no camera passes the pooling visibility gate."""


class ConfigError(SemanticTrajectoryError):
    r"""Raised when an experiment configuration fails validation.

    Parameters
    ----------
    message : str
        Description of the problem.
    key : str, optional
        Dotted path of the offending field, e.g. ``scene.bodies``.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class PipelineError(SemanticTrajectoryError):
    r"""Raised when a pipeline stage fails.

    Parameters
    ----------
    stage : str
        Name of the failing stage.
    message : str
        Description of the failure.
    """

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
