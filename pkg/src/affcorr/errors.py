"""Exception types raised across the package."""


class AffcorrError(Exception):
    """Base class for every error raised by affcorr."""


class InvalidInput(AffcorrError, ValueError):
    pass


class ShapeError(AffcorrError, ValueError):
    pass


class StateError(AffcorrError, RuntimeError):
    pass


class NoLabel(AffcorrError, ValueError):
    pass


class DataError(AffcorrError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep the message readable.
        return str(self.args[0]) if self.args else ""


class DivergenceError(AffcorrError, RuntimeError):
    pass


class FormatError(AffcorrError, ValueError):
    pass
