"""Exception hierarchy shared by all modules."""


class EdgemacError(Exception):
    """Base class for every error raised by this package."""


class DecodeError(EdgemacError):
    """Raster bytes could not be decoded."""


class ModalityError(EdgemacError):
    """Input has the wrong channel layout or value domain (e.g. color image)."""


class DimensionError(EdgemacError):
    """Empty or degenerate raster dimensions."""


class ShapeError(EdgemacError):
    """Array shapes disagree with an operation's contract."""


class ConfigError(EdgemacError):
    """Unknown configuration key or out-of-range value."""


class FormatError(EdgemacError):
    """Binary artifact is malformed, truncated, or of the wrong kind."""


class SizeError(EdgemacError):
    """Input is smaller than the network's minimum footprint."""


class ZeroDescriptorError(EdgemacError):
    """The pooled activation vector is all zero and cannot be normalized."""


class MiningError(EdgemacError):
    """Not enough eligible negatives with distinct model ids."""


class ProtocolError(EdgemacError):
    """Search protocol mismatch (single- vs multi-descriptor index)."""


class SampleError(EdgemacError):
    """Too few samples to learn a transform."""


class AggregationError(EdgemacError):
    """Descriptor sum has zero norm and cannot be normalized."""


class WhiteningError(EdgemacError):
    """Whitened vector has zero norm and cannot be normalized."""


class SolverError(EdgemacError):
    """Iterative solver failed to reach the required residual."""


class LabelError(EdgemacError):
    """Classifier label set is invalid (e.g. a single class)."""


class InputError(EdgemacError):
    """Evaluation or pipeline input violates a precondition."""


class StateError(EdgemacError):
    """A cached forward pass does not match the current weights."""
