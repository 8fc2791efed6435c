"""Exception types shared across the package.

Two families matter for the CLI exit-code contract: configuration problems
(bad input, exit 1) and numerical failures (exit 2).
"""


class LdlabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LdlabError):
    """Invalid model/config input: bad geometry, unknown keys, missing data."""


class NumericalError(LdlabError):
    """A computation failed: diverged solve, singular geometry, unstable model."""


class SolverError(NumericalError):
    """Relaxation failed to converge. Carries the partial result, if any."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class SingularityError(NumericalError):
    """Two interaction partners (nearly) coincide; energy is undefined."""


class StabilityError(NumericalError):
    """Phonon-stability gate failed for the homogeneous model."""
