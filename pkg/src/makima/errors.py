"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, ArtifactIOError -> 3,
NumericError (and subclasses) -> 4.
"""


class MakimaError(Exception):
    """Base class for all package errors."""


class ConfigError(MakimaError):
    """Invalid configuration, manifest content, or out-of-range parameter."""


class ManifestError(ConfigError):
    """Malformed or inconsistent mask manifest."""


class ArtifactIOError(MakimaError):
    """Missing or unreadable/unwritable input or output file."""

    def __init__(self, message: str, path: str | None = None):
        super().__init__(message)
        self.path = path


class NumericError(MakimaError):
    """Numeric contract violation (shapes, degenerate values, injection)."""


class ShapeError(NumericError):
    """Dimension mismatch between tensors."""


class DegenerateVectorError(NumericError):
    """Zero-norm vector where a direction is required."""


class InjectionError(NumericError):
    """Cached attention values or modulation delta do not fit the layer."""


class PropagationError(NumericError):
    """Keyframe blending received inconsistent inputs."""


class PipelineError(NumericError):
    """Predictor or step-level failure, annotated with step/layer context."""
