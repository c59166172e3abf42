"""Exception hierarchy shared by every holoslide module."""


class HoloslideError(Exception):
    """Base class for all library errors."""


class InvalidInput(HoloslideError, ValueError):
    pass


class IoError(HoloslideError, OSError):
    pass


class BoundsError(HoloslideError, IndexError):
    pass


class FormatError(HoloslideError, ValueError):
    pass


class ShapeError(HoloslideError, ValueError):
    pass


class NumericalError(HoloslideError, ArithmeticError):
    pass


class ConfigError(HoloslideError, ValueError):
    pass


class DegenerateHistogram(HoloslideError):
    """Raised when Otsu thresholding finds no class separation.

    The caller still gets the all-background result through ``mask``.
    """

    def __init__(self, message, mask=None):
        super().__init__(message)
        self.mask = mask


class NoForeground(HoloslideError):
    pass


class InvalidTiling(HoloslideError, ValueError):
    pass


class InvalidCodebook(HoloslideError, ValueError):
    pass


class TokenError(HoloslideError, IndexError):
    pass


class TrainingDiverged(HoloslideError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class DegenerateSample(HoloslideError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class GenerationError(HoloslideError):
    pass
