"""Exception types shared across the package."""


class UhfflowError(Exception):
    """Base class for all package errors."""


class ParamsMismatchError(UhfflowError):
    """Operands built over different algebra parameters."""


class WindowError(UhfflowError):
    """Operator support sticks out of the requested site window."""


class StateError(UhfflowError):
    """Density matrix fails Hermiticity / positivity / trace checks."""


class SizeGuardError(UhfflowError):
    """A dense or enumerative computation would exceed its size guard."""


class ConvergenceError(UhfflowError):
    """Iteration failed to reach the requested tolerance.

    The partial result, when one exists, is attached as ``partial``.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class DivergenceError(UhfflowError):
    """An integrand that must decay was found not to."""


class FitError(UhfflowError):
    """Decay-rate fit received unusable data."""


class ConfigError(UhfflowError):
    """Experiment configuration failed validation."""

    def __init__(self, message, *, section=None, field=None):
        where = ""
        if section is not None:
            where = f"[{section}]"
            if field is not None:
                where += f" {field}"
            where += ": "
        super().__init__(where + message)
        self.section = section
        self.field = field
