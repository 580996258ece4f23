"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes: configuration and usage
problems exit 1, data/format/domain problems exit 2, numerical failures
exit 3.
"""


class AnoScoreError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AnoScoreError):
    """Invalid configuration: bad dimensions, unknown scales, unusable options."""


class DataError(AnoScoreError):
    """Invalid data: empty datasets, non-finite values, mismatched shapes."""


class DomainError(AnoScoreError):
    """Scalar argument outside the mathematically valid domain."""


class FormatError(AnoScoreError):
    """Malformed or truncated binary/structured file."""


class NumericalError(AnoScoreError):
    """Non-finite intermediate state or a diverging computation."""


class SolverError(NumericalError):
    """ODE solver gave up before reaching the end of the integration span.

    Attributes
    ----------
    t_reached : float
        Integration time reached before the failure.
    """

    def __init__(self, message: str, t_reached: float):
        super().__init__(message)
        self.t_reached = t_reached
