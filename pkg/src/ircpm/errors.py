"""Exception types raised across the package."""


class IRCPMError(Exception):
    """Base class for all package errors."""


class ContractError(IRCPMError, ValueError):
    """An argument violates an operation's precondition (shape, domain)."""


class CutLocusError(ContractError):
    """Two points are at or beyond the injectivity radius of each other."""


class ConfigError(IRCPMError, ValueError):
    """A configuration is malformed.

    Attributes:
        field: dotted path of the offending field, when known.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class UnsupportedError(IRCPMError, NotImplementedError):
    """The requested combination of options is not implemented."""


class DegenerateFlowError(IRCPMError, ArithmeticError):
    """The projected flow Jacobian is numerically singular."""


class ImplicitSolveError(IRCPMError, ArithmeticError):
    """The implicit linear system at the inner minimizer is not positive definite."""

    def __init__(self, message, min_eigenvalue=None):
        self.min_eigenvalue = min_eigenvalue
        super().__init__(message)


class TrainingHealthError(IRCPMError, RuntimeError):
    """Training produced non-finite values or too many failed inner solves."""

    def __init__(self, message, segment=None):
        self.segment = segment
        super().__init__(message)
