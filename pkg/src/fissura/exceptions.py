"""Exception hierarchy shared by all modules."""


class FissuraError(Exception):
    """Base class; the CLI maps these to exit status 1."""


class ParameterError(FissuraError, ValueError):
    pass


class ShapeError(FissuraError, ValueError):
    pass


class BoundsError(FissuraError, IndexError):
    pass


class FormatError(FissuraError):
    """A file does not follow the expected on-disk layout."""


class TruncationError(FormatError):
    pass


class EstimationError(FissuraError):
    pass


class CheckpointError(FissuraError):
    pass


class DataError(FissuraError):
    pass


class NumericError(FissuraError, ArithmeticError):
    """Non-finite values appeared during training."""
