"""Exception hierarchy shared by every orthoforest module."""

from __future__ import annotations


class OrthoForestError(Exception):
    """Base class; the CLI turns any of these into exit status 1."""


class SchemaError(OrthoForestError):
    pass


class IngestionError(OrthoForestError):
    """A data cell could not be parsed or is not finite."""

    def __init__(self, message: str, row: int = -1, column: str = "") -> None:
        super().__init__(message)
        self.row = row
        self.column = column


class SizeError(OrthoForestError):
    pass


class WeightError(OrthoForestError):
    pass


class ShapeError(OrthoForestError):
    pass


class DivergenceError(OrthoForestError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int = -1) -> None:
        super().__init__(message)
        self.epoch = epoch


class NodeError(OrthoForestError):
    """Failure inside a tree node; ``path`` is the L/R route from the root."""

    def __init__(self, message: str, path: str = "") -> None:
        super().__init__(f"{message} (node '{path or 'root'}')")
        self.path = path


class NoTreatmentVariationError(OrthoForestError):
    pass


class DegenerateHessianError(OrthoForestError):
    pass


class ConfigError(OrthoForestError):
    pass


class WeakInstrumentError(OrthoForestError):
    pass


class RankError(OrthoForestError):
    pass


class NonConcaveError(OrthoForestError):
    pass


class PolicyError(OrthoForestError):
    pass


class NotFittedError(OrthoForestError):
    pass
