"""Exception hierarchy shared by every module.

The CLI maps :class:`NLLinkNetError` subclasses to exit code 1.
"""


class NLLinkNetError(Exception):
    """Base class for domain errors."""


class ShapeError(NLLinkNetError, ValueError):
    pass


class ConfigurationError(NLLinkNetError, ValueError):
    pass


class NonFiniteError(NLLinkNetError, FloatingPointError):
    pass


class GraphError(NLLinkNetError, RuntimeError):
    """Misuse of the autodiff tape (non-scalar root, consumed graph)."""


class CheckpointError(NLLinkNetError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic or unsupported version."""


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    """Stored tensors do not fit the model built from the stored config."""


class DataError(NLLinkNetError):
    pass


class UnreadableImageError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class NonGrayscaleMaskError(DataError):
    pass
