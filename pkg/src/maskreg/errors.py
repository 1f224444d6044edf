"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MaskRegError(Exception):
    exit_code = 1


class DataError(MaskRegError, ValueError):
    """Bad input data: shapes, channels, manifests, strategies."""

    exit_code = 3


class GeometryError(DataError):
    pass


class NumericError(MaskRegError, ArithmeticError):
    exit_code = 4


class ModelFormatError(MaskRegError, IOError):
    """A model file could not be decoded."""

    exit_code = 5


class ImageIOError(MaskRegError, IOError):
    exit_code = 5


class SizeLimitError(DataError):
    """A dense solve would exceed the configured memory cap."""
