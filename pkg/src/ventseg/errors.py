"""Exception types raised across the package.

Everything derives from VentsegError so callers can catch one base type;
the I/O errors additionally derive from the matching builtin (ValueError /
IOError) so generic handling keeps working.
"""


class VentsegError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VentsegError, ValueError):
    """An array argument has an incompatible shape."""


class ConfigError(VentsegError, ValueError):
    """A configuration value is out of range or inconsistent."""


class EmptyMaskError(VentsegError, ValueError):
    """A ground-truth mask required to be non-empty has no positive voxels."""


class NonFiniteGradientError(VentsegError, FloatingPointError):
    """A gradient contained NaN or infinity; the optimizer step was aborted."""


class FormatError(VentsegError, IOError):
    """Base class for binary container read failures."""


class BadMagicError(FormatError):
    """The file does not start with the expected magic bytes."""


class UnsupportedVersionError(FormatError):
    """The container version is newer than this reader understands."""


class TruncatedFileError(FormatError):
    """The file ended before the declared payload was complete."""


class UnknownDtypeError(FormatError):
    """The volume header declares an element-type code this reader lacks."""


class UnknownLayerKindError(FormatError):
    """A checkpoint layer-table entry has an unrecognized kind code."""


class PhantomGenerationError(VentsegError, RuntimeError):
    """The synthetic volume generator exhausted its retry budget."""
