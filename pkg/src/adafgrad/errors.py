"""Exception types shared across the package.

The CLI maps these onto exit codes: validation/configuration problems exit
with 2, numeric failures during a run exit with 3.
"""


class AdafgradError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(AdafgradError, ValueError):
    """Array shapes or declared dimensions do not line up."""


class ConfigurationError(AdafgradError, ValueError):
    """A config value is invalid (zero capacity, bad method name, ...)."""


class ConsistencyError(AdafgradError, ValueError):
    """Structural invariant violated (index gaps, overlapping entries, ...)."""


class FormatError(AdafgradError, ValueError):
    """A binary or JSON artifact on disk is malformed."""


class ManifestError(AdafgradError, ValueError):
    """Dataset manifest failed validation."""


class EmptyBufferError(AdafgradError, RuntimeError):
    """Replay was requested from an empty rehearsal buffer."""


class DegenerateGradientError(AdafgradError, ValueError):
    """A zero vector reached a cosine-normalized gradient comparison."""


class UndefinedMetricError(AdafgradError, ValueError):
    """A metric has no defined value on the given inputs."""


class NonFiniteError(AdafgradError, RuntimeError):
    """A non-finite value appeared where the run must abort.

    ``context`` carries a human-readable locator (typically a slide id).
    """

    def __init__(self, message: str, context: str = ""):
        super().__init__(message if not context else f"{message} [{context}]")
        self.context = context
