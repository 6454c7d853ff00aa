"""Exception hierarchy shared across the package."""


class VoxAttnError(Exception):
    """Base class for all package errors."""


class ShapeError(VoxAttnError, ValueError):
    """Tensor extents do not agree with what an operation needs."""


class ConfigError(VoxAttnError, ValueError):
    """A configuration (network, block, run) is inconsistent or out of range."""


class StateError(VoxAttnError, RuntimeError):
    """An object is used before the state it depends on exists."""


class NumericError(VoxAttnError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class InputError(VoxAttnError, ValueError):
    """Caller-supplied data is malformed (labels out of range, length mismatch...)."""


class UsageError(VoxAttnError, RuntimeError):
    """An API was called in a way it does not support."""


class FormatError(VoxAttnError, ValueError):
    """A binary or text file does not follow its documented layout."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass
