"""Exception hierarchy.

Everything raised on purpose derives from :class:`MergeBarrierError`, which
lets the CLI map domain failures to exit status 1.
"""


class MergeBarrierError(Exception):
    """Base class for all domain errors raised by this package."""


class DimensionError(MergeBarrierError, ValueError):
    pass


class ParameterError(MergeBarrierError, ValueError):
    pass


class ConvergenceError(MergeBarrierError, ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InputError(MergeBarrierError, ValueError):
    pass


class ConfigError(MergeBarrierError, ValueError):
    pass


class DegenerateBatchError(MergeBarrierError, ValueError):
    pass


class TrainingError(MergeBarrierError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SchemaError(MergeBarrierError, ValueError):
    def __init__(self, message, names=()):
        super().__init__(message)
        self.names = list(names)


class CalibrationError(MergeBarrierError, ValueError):
    pass


class DegenerateError(MergeBarrierError, ValueError):
    pass


class BundleError(MergeBarrierError, ValueError):
    pass


class UnrecoverableRowError(MergeBarrierError, ValueError):
    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = list(rows)


class FormatError(MergeBarrierError, ValueError):
    pass


class CorruptionError(MergeBarrierError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class StagingError(MergeBarrierError, FileNotFoundError):
    pass
