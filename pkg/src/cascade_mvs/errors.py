"""Exception hierarchy shared by every module."""


class CascadeError(Exception):
    """Base class for all errors raised by the package."""


class BehindCamera(CascadeError, ValueError):
    pass


class NonPositiveDepth(CascadeError, ValueError):
    pass


class EmptyRange(CascadeError, ValueError):
    pass


class ZeroCount(CascadeError, ValueError):
    pass


class BadDimensions(CascadeError, ValueError):
    pass


class NoSourceViews(CascadeError, ValueError):
    pass


class ShapeMismatch(CascadeError, ValueError):
    pass


class NonPositiveTemperature(CascadeError, ValueError):
    pass


class ChannelMismatch(CascadeError, ValueError):
    pass


class StaleCache(CascadeError, ValueError):
    pass


class NonPositiveLambda(CascadeError, ValueError):
    pass


class EmptyDataset(CascadeError, ValueError):
    pass


class DegenerateGeometry(CascadeError, ValueError):
    pass


class TooFewViews(CascadeError, ValueError):
    pass


class EmptyCloud(CascadeError, ValueError):
    pass


class EmptyMask(CascadeError, ValueError):
    pass


class ConfigError(CascadeError, ValueError):
    pass


class IoError(CascadeError, OSError):
    pass
