"""Exception hierarchy shared by the library and the command line."""


class DLAError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DLAError, ValueError):
    """Invalid, unknown or missing configuration key."""


class DataError(DLAError, ValueError):
    """Input data is inconsistent or unusable."""


class ShapeMismatchError(DataError):
    """Two inputs that must share dimensions do not."""


class VolumeFormatError(DataError):
    """A volume, label or checkpoint file could not be decoded."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class NonFiniteValueError(VolumeFormatError):
    pass


class PhantomError(DataError):
    """The phantom description is geometrically inconsistent."""


class EmptyClassError(DataError):
    """A tissue class has no voxels, so the case cannot be used."""

    def __init__(self, class_name):
        self.class_name = class_name
        super().__init__(f"tissue class '{class_name}' is empty")


class NumericalError(DLAError, ArithmeticError):
    """Training produced a non-finite value."""
