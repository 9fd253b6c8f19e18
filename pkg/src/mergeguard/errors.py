"""Exception hierarchy shared by every mergeguard subsystem."""


class MergeGuardError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(MergeGuardError, ValueError):
    pass


class ContractError(MergeGuardError, ValueError):
    pass


class TrainingError(MergeGuardError, FloatingPointError):
    pass


class DataError(MergeGuardError, ValueError):
    pass


class IngestionError(DataError):
    pass


class SpecError(MergeGuardError, ValueError):
    """Invalid attack / trigger parameters."""


class MetricError(MergeGuardError, ValueError):
    pass


class MergeError(MergeGuardError, ValueError):
    pass


class UnsupportedMergeError(MergeError):
    pass


class DefenseError(MergeGuardError, RuntimeError):
    pass


class AccountingError(MergeGuardError, ValueError):
    pass


class CorruptionError(MergeGuardError, IOError):
    pass


class VersionError(MergeGuardError, IOError):
    pass


class ConfigError(MergeGuardError, ValueError):
    pass


class StageError(MergeGuardError, RuntimeError):
    """An experiment stage failed; carries the stage name and partial report."""

    def __init__(self, stage, cause, partial=None):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.partial = partial
