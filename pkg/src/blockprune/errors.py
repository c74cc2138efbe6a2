"""Exception hierarchy shared across the package."""


class BlockPruneError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(BlockPruneError, ValueError):
    pass


class UsageError(BlockPruneError, RuntimeError):
    pass


class NumericError(BlockPruneError, FloatingPointError):
    pass


class MaskError(BlockPruneError, ValueError):
    pass


class ConfigError(BlockPruneError, ValueError):
    pass


class DataError(BlockPruneError, ValueError):
    pass


class CorruptCheckpointError(DataError):
    pass


class ReportError(BlockPruneError, ValueError):
    pass


class TrainingDivergence(BlockPruneError, RuntimeError):
    """Loss became non-finite; ``state`` holds the last finite snapshot."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
