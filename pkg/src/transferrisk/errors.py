"""Exception hierarchy shared by every stage of the toolkit.

Each exception carries an ``exit_code`` so the command line front end can map
failures onto its documented status codes without a lookup table.
"""


class TransferRiskError(Exception):
    exit_code = 4


class ConfigError(TransferRiskError, ValueError):
    exit_code = 2


class PolicyError(ConfigError):
    """Threshold policy violates ``0 < r2 < r1 < 1`` or a cardinality minimum."""


class ShapeError(TransferRiskError, ValueError):
    exit_code = 2


class DegenerateInputError(TransferRiskError, ValueError):
    exit_code = 4


class NumericalError(TransferRiskError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericalError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class RankDeficiencyError(NumericalError):
    pass


class InsufficientDataError(NumericalError):
    pass


class InstabilityError(NumericalError):
    pass


class InsufficientPoolError(TransferRiskError):
    """Raised when M1/M2 cannot satisfy the policy's cardinality minimums."""

    exit_code = 3

    def __init__(self, message, pool=None, nearest_misses=()):
        super().__init__(message)
        self.pool = pool
        self.nearest_misses = tuple(nearest_misses)


class IncompleteCoverageError(TransferRiskError):
    exit_code = 4

    def __init__(self, message, gaps=()):
        super().__init__(message)
        self.gaps = tuple(gaps)


class FormatError(TransferRiskError):
    exit_code = 5

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DependencyError(TransferRiskError, FileNotFoundError):
    exit_code = 5

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
