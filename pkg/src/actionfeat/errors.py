"""Exception hierarchy shared by every module of the package."""


class ActionFeatError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ActionFeatError):
    pass


class ConfigError(ActionFeatError):
    pass


class NumericError(ActionFeatError):
    pass


class ParseError(ActionFeatError):
    """Malformed text input; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ManifestError(ParseError):
    pass


class ImageDecodeError(ActionFeatError):
    pass


class WeightFileError(ActionFeatError):
    pass


class MagicError(WeightFileError):
    pass


class VersionError(WeightFileError):
    pass


class TruncatedError(WeightFileError):
    pass


class WeightShapeError(WeightFileError):
    def __init__(self, message, layer=None):
        self.layer = layer
        super().__init__(message)


class DivergedError(NumericError):
    """Raised when the training loss becomes NaN or infinite."""

    def __init__(self, iteration, loss):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"loss diverged at iteration {iteration} (loss={loss})")


class SweepError(ActionFeatError):
    """An evaluation inside a layer-size sweep failed; ``size`` names it."""

    def __init__(self, size, cause):
        self.size = size
        super().__init__(f"evaluation failed at layer size {size}: {cause}")
