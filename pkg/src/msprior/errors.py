"""Exception hierarchy.

The CLI maps these onto exit codes: validation problems exit with 2 and
numeric failures with 3.
"""


class MSPError(Exception):
    """Base class for all package errors."""


class ParameterError(MSPError, ValueError):
    """A distribution or model parameter is outside its domain."""


class DomainError(MSPError, ValueError):
    """A density was evaluated outside its support."""


class ConfigError(MSPError, ValueError):
    """An experiment or chain configuration is invalid."""


class FitError(MSPError, ValueError):
    """An induced-marginal estimate could not be fitted."""


class NumericError(MSPError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""


class InvariantError(MSPError, RuntimeError):
    """A Markov chain reached a state it must never occupy."""


class ConvergenceError(NumericError):
    """An iterative procedure did not converge.

    Attributes
    ----------
    residual : float
        Size of the remaining error when iteration stopped.
    """

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual
