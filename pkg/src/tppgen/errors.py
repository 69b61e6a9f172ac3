"""Exception types shared across the toolkit."""


class TPPError(Exception):
    """Base class for toolkit errors."""


class NonFiniteLoss(TPPError, FloatingPointError):
    pass


class NonFiniteGradient(TPPError, FloatingPointError):
    pass


class CheckpointError(TPPError):
    pass


class SchemaError(CheckpointError):
    """Checkpoint and configuration disagree."""


class DataError(TPPError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class EmptyDataset(DataError):
    pass


class SplitError(DataError):
    pass


class RescaleError(DataError):
    pass


class DomainError(TPPError, ValueError):
    pass


class ConfigError(TPPError, ValueError):
    pass


class SamplerDiverged(TPPError, FloatingPointError):
    pass


class EmptyEval(TPPError):
    pass


class UnstableProcess(UserWarning):
    """Branching matrix of a simulated Hawkes process is supercritical."""


class InsufficientData(UserWarning):
    pass
