"""Exception and warning types shared across the package."""


class ManocError(Exception):
    """Base class for all package-specific errors."""


class DomainError(ManocError):
    """A chart point lies outside the declared chart domain."""


class DomainExitError(DomainError):
    """An integrated path left the chart domain; carries the exit time."""

    def __init__(self, message, t_exit):
        super().__init__(f"{message} (exit at t={t_exit:.6g})")
        self.t_exit = t_exit


class GeometryError(ManocError):
    """The metric violated a structural requirement (symmetry, SPD)."""


class ContractError(ManocError):
    """An argument violated an interface contract (e.g. base-point mismatch)."""


class NonconvergenceError(ManocError):
    """An iterative solve failed; carries the last residual."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class SchemaError(ManocError):
    """A problem file was rejected; ``code`` is a machine-readable reason."""

    def __init__(self, code, message=None):
        super().__init__(message or code)
        self.code = code


class SignPatternError(ManocError):
    """A multiplier violated the sign/complementarity pattern; names the index."""

    def __init__(self, index, message):
        super().__init__(message)
        self.index = index


class EvaluationWarning(UserWarning):
    """An expression evaluated to a non-finite value."""
