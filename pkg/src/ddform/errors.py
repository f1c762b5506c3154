"""Exception types shared across the package."""


class DdformError(Exception):
    """Base class for package errors."""


class DomainError(DdformError, ValueError):
    """An argument is outside the operation's domain."""


class ConfigError(DdformError, ValueError):
    """An experiment configuration failed to parse or validate."""


class AdmissibilityError(DdformError):
    """A stabilization modulus failed the smallness or monotonicity gate."""


class DegenerateProfileError(DdformError):
    """The spherical quadratic mean of the coefficients is too close to zero."""

    def __init__(self, radius: float, value: complex, margin: float):
        self.radius = radius
        self.value = value
        self.margin = margin
        super().__init__(
            f"|quadratic mean| = {abs(value):.3e} below margin {margin} at r = {radius:.3e}")


class ContractViolationError(DdformError):
    """An operator input violated a documented precondition (e.g. zero mean)."""


class DivergenceError(DdformError):
    """The fixed-point iteration failed to contract."""
