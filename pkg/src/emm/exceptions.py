"""Exception hierarchy. CLI exit codes hang off the ``exit_code`` attribute."""


class EmmError(Exception):
    exit_code = 1


class UsageError(EmmError):
    """API misuse, e.g. backward() without a recorded forward graph."""


class DimensionError(EmmError, ValueError):
    exit_code = 5


class NonFiniteError(EmmError, FloatingPointError):
    """An op produced NaN or Inf."""


class ConfigError(EmmError, ValueError):
    exit_code = 2


class DataError(EmmError, ValueError):
    exit_code = 3


class NoCommonStructure(EmmError):
    exit_code = 4

    def __init__(self, message: str, models: tuple[str, str] | None = None):
        super().__init__(message)
        self.models = models


class TailMismatch(EmmError):
    exit_code = 4

    def __init__(self, message: str, models: list[str]):
        super().__init__(message)
        self.models = models


class NotApplicable(EmmError):
    """Partner selection requested with a single task."""


class TrainingDiverged(EmmError, FloatingPointError):
    def __init__(self, epoch: int, batch: int, task: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}, task {task!r}")
        self.epoch = epoch
        self.batch = batch
        self.task = task


class ModelFileError(EmmError):
    exit_code = 6
    code = "model-file"


class FormatError(ModelFileError):
    code = "bad-magic"


class VersionError(ModelFileError):
    code = "version-mismatch"


class TruncatedFile(ModelFileError):
    code = "truncated"


class ChecksumError(ModelFileError):
    code = "checksum"


class UndefinedMetric(EmmError, ValueError):
    """AUC requested on a single-class label vector."""
