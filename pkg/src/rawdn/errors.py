"""Exception hierarchy shared by every rawdn module."""


class RawdnError(Exception):
    """Base class for all errors raised by rawdn."""


class DataError(RawdnError):
    """Invalid input data or on-disk content (CLI exit code 3)."""


class NumericError(RawdnError):
    """Numerical failure: divergence, non-finite values, failed checks (exit code 4)."""


class PatternError(DataError):
    pass


class ShapeMismatchError(DataError, ValueError):
    pass


class BadMagicError(DataError):
    pass


class VersionMismatchError(DataError):
    pass


class TruncatedPayloadError(DataError):
    pass


class DimensionOverflowError(DataError):
    pass


class UnknownTensorError(DataError):
    pass


class DegenerateParamsError(DataError, ValueError):
    pass


class RankDeficiencyError(NumericError):
    pass


class SingularKernelError(NumericError):
    pass


class RangeError(DataError, ValueError):
    """A blend weight map left [0, 1]."""


class NonFiniteLossError(NumericError):
    def __init__(self, message: str, tensor_name: str | None = None):
        super().__init__(message)
        self.tensor_name = tensor_name


class DivergenceError(NumericError):
    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration
