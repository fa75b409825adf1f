"""Exception hierarchy. The CLI maps each family to an exit code."""


class McdError(Exception):
    exit_code = 1


class ConfigError(McdError):
    exit_code = 2


class DataError(McdError):
    exit_code = 3


class FormatError(DataError):
    """Malformed on-disk input (IDX, CSV, checkpoint)."""


class TrainingError(McdError):
    exit_code = 4

    def __init__(self, message, epoch=None, batch=None):
        if epoch is not None:
            message = f"{message} (epoch {epoch}, batch {batch})"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class DimensionError(McdError, ValueError):
    pass


class ContractError(McdError, ValueError):
    """A precondition of an operation was violated by the caller."""


class MetricsError(McdError, ValueError):
    exit_code = 3
