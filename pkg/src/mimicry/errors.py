"""Exception types shared across the package."""


class MimicryError(Exception):
    """Base class for all package errors."""


class DomainError(MimicryError, ValueError):
    """An argument lies outside the domain where a quantity is defined."""


class ModelValidityError(MimicryError):
    """A shift model produced a trajectory that violates its own constraints."""


class SolverError(MimicryError):
    """The ODE integrator exhausted its step budget or could not converge."""


class RegularityError(MimicryError):
    """A denominator or density fell below the regularity floor."""


class PositivityError(MimicryError):
    """A regime requires a treatment value with no support in some stratum."""

    def __init__(self, message, stratum=None):
        super().__init__(message)
        self.stratum = stratum


class IdentificationError(MimicryError):
    """The data carry no information about the blip parameter."""


class DegenerateVarianceError(MimicryError):
    """The estimated variance of a score statistic is zero or undefined."""


class ModelValidityWarning(UserWarning):
    """Emitted when a shift model sits outside its documented constraints."""
