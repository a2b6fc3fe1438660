"""Exception types shared across the package."""


class LindqocError(Exception):
    """Base class for all package errors."""


class DomainError(LindqocError, ValueError):
    """An argument lies outside the domain of the operation (e.g. t outside [0, T])."""


class ValidationError(LindqocError, ValueError):
    """An object violates one of its structural invariants."""


class SingularRescalingError(LindqocError):
    """The Lindbladian vanishes identically, so the time rescaling is undefined."""


class PlanTooLargeError(LindqocError):
    """The requested simulation plan exceeds the configured work budget."""


class ParameterError(LindqocError, ValueError):
    """Optimizer hyperparameters violate a required inequality."""


class ConfigError(LindqocError, ValueError):
    """A configuration or input file could not be parsed or is inconsistent."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field
