"""Exception hierarchy.

Every failure the library raises on purpose derives from :class:`PairFreezeError`
so callers (and the CLI) can tell structured errors apart from bugs.
"""


class PairFreezeError(Exception):
    """Base class for all structured errors raised by pairfreeze."""


class ShapeError(PairFreezeError, ValueError):
    pass


class GradientError(PairFreezeError, RuntimeError):
    """Backward called on something that cannot be differentiated, or an
    optimizer step taken without gradients."""


class NumericalError(PairFreezeError, FloatingPointError):
    pass


class ConfigError(PairFreezeError, ValueError):
    pass


class LayerIndexError(PairFreezeError, IndexError):
    pass


class ScheduleError(PairFreezeError, ValueError):
    pass


class DataFormatError(PairFreezeError, ValueError):
    """Malformed dataset bytes. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ReportError(PairFreezeError, ValueError):
    pass
