"""Exception types shared across the package."""


class FluxQMCError(Exception):
    """Base class for all package-specific errors."""


class CapacityError(FluxQMCError):
    """An exact-enumeration routine was asked for more than it supports."""


class TheoryViolationError(FluxQMCError):
    """Parameters leave the regime in which the error theory applies."""


class InfeasibilityError(FluxQMCError):
    """A weight integral diverges for the requested parameters."""


class AlignmentError(FluxQMCError):
    """A subdomain is not a union of mesh elements."""


class ModelInvalidError(FluxQMCError):
    """A random-field configuration violates a model invariant."""


class SolverError(FluxQMCError):
    """Iterative solve failed to converge; carries the final residual."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
