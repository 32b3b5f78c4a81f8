"""Exception types shared across the package."""


class UsktError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(UsktError):
    """Operand shapes are incompatible for the requested operation."""


class NumericsError(UsktError):
    """A forward computation produced non-finite values."""


class FormatError(UsktError):
    """An input file (event stream, weight bundle) is malformed."""


class ConfigError(UsktError):
    """A run configuration is invalid (unknown key, bad value)."""


class TrainAbort(UsktError):
    """Training stopped because the loss or an activation went non-finite."""
