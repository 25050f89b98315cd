"""Exception types raised across the toolkit.

Every failure the library can diagnose is a subclass of :class:`DermaliteError`;
the CLI prints the class name on failure.
"""


class DermaliteError(Exception):
    """Base class for all toolkit errors."""


# -- container formats -------------------------------------------------------

class FormatError(DermaliteError):
    """Problem decoding an NPY/NPZ container."""

    def __init__(self, message, entry=None):
        self.entry = entry
        if entry is not None:
            message = f"{entry}: {message}"
        super().__init__(message)


class BadMagic(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class HeaderMalformed(FormatError):
    pass


class PayloadTruncated(FormatError):
    pass


class NotAZip(FormatError):
    pass


class UnsupportedCompression(FormatError):
    pass


# -- dataset -----------------------------------------------------------------

class DatasetError(DermaliteError):
    pass


class MissingKey(DatasetError):
    def __init__(self, key):
        self.key = key
        super().__init__(key)


class ShapeMismatch(DermaliteError):
    pass


class LabelOutOfRange(DermaliteError):
    pass


class UnknownClass(DermaliteError):
    pass


# -- statistics --------------------------------------------------------------

class EmptyClass(DermaliteError):
    pass


class EmptyInput(DermaliteError):
    pass


class ConstantInput(DermaliteError):
    pass


class LengthMismatch(DermaliteError):
    pass


# -- selection ---------------------------------------------------------------

class TooFewPoints(DermaliteError):
    pass


class ClassTooSmall(DermaliteError):
    pass


class IndexOutOfRange(DermaliteError):
    pass


# -- embedding ---------------------------------------------------------------

class DegenerateRow(DermaliteError):
    pass


class NonSymmetric(DermaliteError):
    pass


class NaNInput(DermaliteError):
    pass


# -- network -----------------------------------------------------------------

class DegenerateBatch(DermaliteError):
    pass


class NonFiniteError(DermaliteError):
    """A tensor picked up NaN or Inf."""


class NonFiniteLoss(NonFiniteError):
    pass


class CheckpointError(DermaliteError):
    pass
