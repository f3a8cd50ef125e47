"""Exception hierarchy shared across the package."""


class VmfGosError(Exception):
    """Base class for all package errors."""


class DomainError(VmfGosError, ValueError):
    """An argument lies outside the domain of the operation."""


class DegenerateInputError(DomainError):
    """Input has no direction (e.g. the zero vector)."""


class ShapeError(VmfGosError, ValueError):
    """Array dimensions do not agree."""


class NumericError(VmfGosError, ArithmeticError):
    """A non-finite value was produced or supplied.

    ``component`` names the loss term or parameter where it surfaced.
    """

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class SaturationError(VmfGosError):
    """Mean resultant length is indistinguishable from 1."""

    def __init__(self, message, kappa_max):
        super().__init__(message)
        self.kappa_max = kappa_max


class RecipeError(VmfGosError):
    """A synthetic data recipe could not be realized."""


class ConfigError(VmfGosError):
    """Invalid run configuration."""
