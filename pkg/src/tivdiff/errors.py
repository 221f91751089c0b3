class RejectedInput(ValueError):
    """Caller passed an argument outside the operation's domain."""


class NumericalError(ArithmeticError):
    pass


class DivergenceError(NumericalError):
    pass


class DatasetError(OSError):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class VersionMismatchError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class CheckpointError(DatasetError):
    pass
