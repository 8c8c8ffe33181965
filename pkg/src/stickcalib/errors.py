"""Exception types raised across the toolkit."""

from .geometry import DepthNonPositive


class CalibrationError(RuntimeError):
    """Base class for failures while calibrating."""


class TooFewCorrespondences(CalibrationError):
    pass


class DegenerateConfiguration(CalibrationError):
    pass


class CheiralityAmbiguous(CalibrationError):
    pass


class DisconnectedGraph(CalibrationError):
    pass


class MaskedResidual(CalibrationError):
    """A residual was requested for an observation that is not visible."""


class InconsistentLayout(CalibrationError):
    pass


class NumericalFailure(CalibrationError):
    pass


class NoStickFrames(CalibrationError):
    pass


class DegenerateLength(CalibrationError):
    pass


class CameraCountMismatch(ValueError):
    pass


class StageError(CalibrationError):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


__all__ = [
    "CalibrationError",
    "CameraCountMismatch",
    "CheiralityAmbiguous",
    "DegenerateConfiguration",
    "DegenerateLength",
    "DepthNonPositive",
    "DisconnectedGraph",
    "InconsistentLayout",
    "MaskedResidual",
    "NoStickFrames",
    "NumericalFailure",
    "StageError",
    "TooFewCorrespondences",
]
