"""Exception hierarchy shared by all syncforge modules."""


class SyncforgeError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(SyncforgeError):
    """An argument violates a documented precondition."""


class InvalidConfig(SyncforgeError):
    """A configuration object is internally inconsistent."""


class ShapeError(SyncforgeError):
    """Array shapes are incompatible with the requested operation."""


class InvalidBatch(SyncforgeError):
    """A batch does not meet the minimum size required by the operation."""


class InvalidPhase(SyncforgeError):
    """An operation was invoked in the wrong training phase."""


class DegenerateDistance(SyncforgeError):
    """A distance fell at or below the floor where 1/d is unusable."""


class TrainingDiverged(SyncforgeError):
    """Training produced a non-finite loss.

    Carries the last checkpoint snapshot taken before the bad step so a
    caller can persist partial progress.
    """

    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
