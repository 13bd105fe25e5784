"""Desk-scale animal2vec: sinc frontend, mean-teacher pretraining, focal finetuning
and per-event evaluation for sparse bioacoustic event detection."""

__version__ = "0.1.0"


class Animal2VecError(Exception):
    """Base class for package errors."""


class FormatError(Animal2VecError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class LabelError(Animal2VecError):
    pass


class ShapeError(Animal2VecError, ValueError):
    pass


class StateError(Animal2VecError):
    pass


class MetricError(Animal2VecError):
    pass


class DivergenceError(Animal2VecError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
