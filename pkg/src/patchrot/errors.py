"""Exception hierarchy.

``DataError`` subclasses map to CLI exit code 3, ``NumericError``
subclasses to exit code 4; usage problems exit 2 via argparse.
"""


class PatchRotError(Exception):
    """Base class for all library errors."""


class DataError(PatchRotError):
    """Malformed or unusable input data."""


class NumericError(PatchRotError):
    """Non-finite values encountered during computation."""


# imaging
class OutOfBoundsError(DataError):
    """Patch rectangle does not fit inside the background."""


class ChannelMismatchError(DataError):
    """Channel counts of two images disagree."""


class MalformedHeaderError(DataError):
    """PPM header does not match the P6 grammar."""


class TruncatedPayloadError(DataError):
    """PPM payload shorter than the header promises."""


class UnsupportedMaxvalError(DataError):
    """PPM maxval other than 255."""


# pretext
class PatchTooLargeError(DataError):
    """Configured ratio produces a patch outside [1, dim] on some axis."""


class EmptyDatasetError(DataError):
    """An operation that needs at least one sample got none."""


# autodiff
class ShapeMismatchError(PatchRotError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteValueError(NumericError):
    """NaN or Inf produced by a forward or backward pass."""


class NotScalarError(PatchRotError):
    """backward() called on a non-scalar tensor."""


class TapeConsumedError(PatchRotError):
    """backward() called twice on the same tape, or with nothing recorded."""


# models
class InvalidClassError(PatchRotError):
    """Requested class index outside the head's range."""


# training
class CheckpointMismatchError(DataError):
    """Checkpoint architecture hash does not match the constructed model."""


class NonFiniteLossError(NumericError):
    """Training loss became NaN/Inf; the run aborts with diagnostics."""


# datasets
class TruncatedRecordError(DataError):
    """CIFAR binary file length is not a multiple of the record size."""


class LabelOutOfRangeError(DataError):
    """Dataset label outside the declared class range."""
