"""Exception taxonomy shared across the package.

The classes map onto the client-facing failure kinds: configuration
mistakes, solver failures, and parameter-domain violations.
"""


class ConfigurationError(Exception):
    """Invalid problem/study configuration."""


class SolverError(Exception):
    """A linear or nonlinear solve failed structurally (e.g. singular matrix)."""


class IterationError(SolverError):
    """An iterative solve did not converge; carries the residual history."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals or [])


class ParameterDomainError(Exception):
    """A parameter point lies outside the problem's parameter box, or a
    sampling plan is incompatible with the box."""
