"""Exception types shared across the package."""


class PignetError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(PignetError):
    """Operand shapes are incompatible."""


class DomainError(PignetError):
    """An operation was applied outside its mathematical domain."""


class UsageError(PignetError):
    """The caller violated an API contract."""


class DataError(PignetError):
    """Dataset contents are inconsistent (counts, label ranges, ...)."""


class ParseError(PignetError):
    """A text file could not be parsed; the message carries path and line."""


class InputError(PignetError):
    """Model input is invalid (non-finite coordinates, wrong width)."""


class DegenerateError(PignetError):
    """The input admits no meaningful answer (all-equal points, batch of one)."""


class FormatError(PignetError):
    """A checkpoint file is corrupt or truncated."""


class CompatibilityError(PignetError):
    """A checkpoint does not match the model it is being loaded into."""


class ConfigError(PignetError):
    """A run configuration is invalid; the message names the field."""


class OracleError(PignetError):
    """A verification oracle could not run (e.g. non-deterministic target)."""
