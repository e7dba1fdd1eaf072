"""Exception types shared across the package."""


class NohairError(Exception):
    """Base class for all package errors."""


class InputError(NohairError):
    """Invalid argument combination or malformed input data."""


class DomainError(NohairError):
    """Argument outside the mathematical domain of an operation."""


class RangeError(NohairError):
    """Requested evaluation outside the covered time range."""


class DivergenceError(NohairError):
    """Integration failed; carries the last conformal time that was reached."""

    def __init__(self, message, last_valid_tau=None):
        super().__init__(message)
        self.last_valid_tau = last_valid_tau


class RhsError(NohairError):
    """ODE right-hand side produced a non-finite value."""


class AliasingError(NohairError):
    """A requested Fourier mode falls outside the resolvable band."""


class AmplitudeError(NohairError):
    """Initial perturbation amplitude violates the almost-RW smallness bound."""


class MetricDegeneracyError(NohairError):
    """Spatial metric is not positive definite at some grid point."""


class ConstraintBlowupError(NohairError):
    """Monitored constraint residual exceeded the configured abort threshold."""


class ConfigError(NohairError):
    """Scenario configuration failed to parse or validate."""
