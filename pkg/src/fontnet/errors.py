"""Exception types shared across the package."""


class FontNetError(Exception):
    """Base class for all errors raised by fontnet."""


class ConfigError(FontNetError, ValueError):
    pass


class MissingGlyph(FontNetError, KeyError):
    pass


class BadResolution(FontNetError, ValueError):
    pass


class ParamOutOfRange(FontNetError, ValueError):
    pass


class InvalidFraction(FontNetError, ValueError):
    pass


class InsufficientItems(FontNetError, ValueError):
    pass


class MissingEmbedding(FontNetError, KeyError):
    pass


class ShapeMismatch(FontNetError, ValueError):
    pass


class ChannelMismatch(ShapeMismatch):
    pass


class DimMismatch(ShapeMismatch):
    pass


class EmptyList(FontNetError, ValueError):
    pass


class EmptyInput(EmptyList):
    pass


class IndexOutOfRange(FontNetError, IndexError):
    pass


class LabelOutOfRange(IndexOutOfRange):
    pass


class NonFinite(FontNetError, FloatingPointError):
    pass


class NonFiniteLoss(NonFinite):
    """Raised by the trainer; carries the path of the diagnostic dump if one was written."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class UnknownVariant(ConfigError):
    pass


class InsufficientClasses(FontNetError, ValueError):
    pass


class InsufficientSamples(FontNetError, ValueError):
    pass


class TooSmall(ShapeMismatch):
    pass


class NotPSD(FontNetError, ValueError):
    pass
