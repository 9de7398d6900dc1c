"""Exception types shared across the package."""


class DsppoolError(Exception):
    """Base class for all package errors."""


class DimensionError(DsppoolError):
    """Operand shapes are inconsistent."""


class ParameterError(DsppoolError):
    """A parameter is outside its valid range."""


class NumericalError(DsppoolError):
    """A numerical failure (non-finite value, rank deficiency, ...)."""

    def __init__(self, msg, iteration=None):
        super().__init__(msg)
        self.iteration = iteration


class FileFormatError(DsppoolError):
    """A binary container failed to parse."""


class BadMagicError(FileFormatError):
    pass


class VersionError(FileFormatError):
    pass


class TruncationError(FileFormatError):
    def __init__(self, expected, actual):
        super().__init__(
            "truncated payload: expected %d bytes, got %d" % (expected, actual)
        )
        self.expected = expected
        self.actual = actual
