"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so library code should raise
the most specific type that applies.
"""


class PoseliftError(Exception):
    """Base class for all package errors."""


class ConfigError(PoseliftError):
    """Invalid configuration, arguments, or checkpoint/architecture mismatch."""


class DataError(PoseliftError):
    """Malformed or inconsistent pose data."""


class DegeneratePoseError(DataError):
    """A pose violates a geometric precondition (e.g. head coincides with root)."""


class DivergenceError(PoseliftError):
    """Training produced a non-finite loss. Carries the last good state if any."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class UnsupportedScenarioError(PoseliftError):
    """Occlusion mask admits no routing of fully-visible lifter segments."""
