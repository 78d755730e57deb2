"""Exception hierarchy shared across the package."""


class MdmError(Exception):
    """Base class for all package errors."""


class ShapeError(MdmError, ValueError):
    pass


class ConfigError(MdmError, ValueError):
    pass


class SizeError(MdmError, ValueError):
    pass


class DataError(MdmError, ValueError):
    pass


class FormatError(MdmError, ValueError):
    pass


class PoolError(MdmError, ValueError):
    pass


class StateError(MdmError, RuntimeError):
    pass


class PreconditionError(MdmError, ValueError):
    pass


class NumericError(MdmError, ArithmeticError):
    """Non-finite value encountered. ``logs`` carries partial run output, if any."""

    def __init__(self, message, logs=None):
        super().__init__(message)
        self.logs = list(logs) if logs is not None else []


class DegenerateRowError(MdmError, ValueError):
    """A row with (near-)zero norm could not be normalized."""

    def __init__(self, row: int, norm: float):
        super().__init__(f"row {row} has degenerate norm {norm:.3e}")
        self.row = row
        self.norm = norm


class UnsupportedError(MdmError, NotImplementedError):
    pass
