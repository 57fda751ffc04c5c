"""Exception hierarchy shared across the package."""


class FFNError(Exception):
    """Base class for all package errors."""


class VolumeFormatError(FFNError):
    """A volume file could not be decoded."""


class HeaderError(VolumeFormatError):
    """The text header is missing keys or has unparseable values."""


class PayloadSizeError(VolumeFormatError):
    """The payload length disagrees with the dims declared in the header."""


class DTypeError(VolumeFormatError):
    """The header names an element type this package does not handle."""


class BoundsError(FFNError, IndexError):
    """A region, seed or node lies (partly) outside a volume."""


class DimsMismatchError(FFNError, ValueError):
    """Two grids that must share a shape do not."""


class ChannelMismatchError(DimsMismatchError):
    pass


class NumericGuardError(FFNError, FloatingPointError):
    """A value left the numerically safe range (exact 0/1 probabilities, NaN, inf)."""


class ArchitectureMismatchError(FFNError):
    """A checkpoint descriptor disagrees with the requested architecture."""


class ConfigError(FFNError, ValueError):
    """Invalid configuration value or cross-field relation."""


class SkeletonFormatError(FFNError):
    """Malformed skeleton file (dangling edge, duplicate node id, bad syntax)."""


class PlacementError(FFNError):
    """Synthetic object placement failed after the retry budget."""

