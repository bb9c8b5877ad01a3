# vslan/core/exceptions.py
"""Error hierarchy. Each class carries the exit code the CLI reports for it."""


class VslanError(Exception):
    exit_code = 1


class ConfigError(VslanError):
    exit_code = 2


class DataError(VslanError):
    exit_code = 3


class FeatureFileError(DataError):
    pass


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class CheckpointError(DataError):
    pass


class VocabularyError(DataError):
    pass


class ClipCountMismatchError(DataError, ValueError):
    pass


class NumericError(VslanError):
    exit_code = 4


class NumericAbortError(NumericError):
    """A training loss component became non-finite."""

    def __init__(self, component: str, epoch: int, step: int):
        self.component = component
        self.epoch = epoch
        self.step = step
        super().__init__(f"non-finite {component} at epoch {epoch}, step {step}")


class NonDeterminismError(NumericError):
    pass


class RewardError(VslanError):
    exit_code = 5


class RewardUnavailableError(RewardError):
    pass


class RewardProtocolError(RewardError):
    pass


class ShapeError(VslanError, ValueError):
    pass


class TokenError(VslanError, IndexError):
    pass


class SequenceError(VslanError, ValueError):
    pass
