"""Exception hierarchy. Every error maps onto one CLI exit code."""

from __future__ import annotations


class GaitMTLError(Exception):
    exit_code = 2


class DataError(GaitMTLError):
    exit_code = 2


class EmptyStream(DataError):
    pass


class InsufficientData(DataError):
    pass


class InvalidConfig(GaitMTLError):
    exit_code = 1


class InvalidData(DataError):
    pass


class LabelingError(DataError):
    def __init__(self, message: str, t: float | None = None):
        super().__init__(message if t is None else f"{message} (t={t:.4f} s)")
        self.t = t


class InvalidLabel(DataError):
    pass


class UndefinedPhase(DataError):
    pass


class InvalidSplit(DataError):
    pass


class ShapeError(GaitMTLError):
    exit_code = 2


class InvalidBatch(ShapeError):
    pass


class NumericalError(GaitMTLError):
    exit_code = 3

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        where = ""
        if epoch is not None:
            where = f" (epoch {epoch}, batch {batch})"
        super().__init__(message + where)
        self.epoch = epoch
        self.batch = batch


class IncompatibleWeights(GaitMTLError):
    exit_code = 2


class CorruptFile(GaitMTLError):
    exit_code = 2
