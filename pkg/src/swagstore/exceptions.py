"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented exit statuses without a lookup table.
"""


class SwagstoreError(Exception):
    exit_code = 1


class ConfigurationError(SwagstoreError, ValueError):
    """Invalid estimator, backend or experiment configuration."""

    exit_code = 1


class DataError(SwagstoreError, ValueError):
    exit_code = 2


class DimensionError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class EmptyPosteriorError(DataError):
    """Raised when moments are requested before any iterate was accepted."""


class SizeRangeError(DataError, OverflowError):
    pass


class FormatError(DataError):
    """Stream does not follow the expected binary layout."""


class CorruptionError(FormatError):
    """Stream has the right framing but is truncated or fails its checksum."""


class IdxFormatError(FormatError):
    pass


class StorageError(SwagstoreError):
    exit_code = 3


class CapacityError(StorageError):
    pass


class ArrayExistsError(StorageError, KeyError):
    pass


class ArrayNotFoundError(StorageError, KeyError):
    pass


class DivergenceError(SwagstoreError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class MissingBaselineError(DataError):
    pass
