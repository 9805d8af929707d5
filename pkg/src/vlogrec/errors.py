"""Exception hierarchy. Each family maps to a distinct CLI exit status."""


class VlogRecError(Exception):
    exit_code = 1


class ValidationError(VlogRecError):
    """Bad input data or configuration."""

    exit_code = 2


class DataIOError(VlogRecError):
    """Missing, unreadable or corrupt files."""

    exit_code = 3


class NumericError(VlogRecError):
    """Non-finite values produced during computation."""

    exit_code = 4


class MalformedPublishingError(ValidationError):
    pass


class EmptyGraphError(ValidationError):
    pass


class EmptyDatasetError(ValidationError):
    pass


class InconsistencyError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class InvalidConfigError(ValidationError):
    pass


class SamplingExhaustedError(ValidationError):
    pass


class EmptyCandidateError(ValidationError):
    pass


class SplitLeakageError(ValidationError):
    pass


class NotFoundError(ValidationError):
    pass


class CorruptCheckpointError(DataIOError):
    pass


class CheckpointVersionError(DataIOError):
    pass


class MalformedRecordError(ValidationError):
    pass
