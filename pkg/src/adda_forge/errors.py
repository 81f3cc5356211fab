"""Exception hierarchy."""


class AddaError(Exception):
    """Base class for all package errors."""


class ConfigError(AddaError, ValueError):
    pass


class ShapeError(AddaError, ValueError):
    pass


class StaleTraceError(AddaError, RuntimeError):
    pass


class NonDeterministicError(AddaError, RuntimeError):
    pass


class FrozenModelError(AddaError, RuntimeError):
    pass


class DomainError(AddaError, ValueError):
    """Input outside the domain of a distance or loss (e.g. negative probabilities)."""


class TrainingDivergedError(AddaError, FloatingPointError):
    pass


class CheckpointError(AddaError, IOError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class IdxFormatError(AddaError, ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass
