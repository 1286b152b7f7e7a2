from typing import Iterable, List, Optional


class EsDrlError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(EsDrlError, ValueError):
    """Invalid experiment configuration; ``issues`` lists one entry per bad field."""

    def __init__(self, message: str, issues: Optional[Iterable[str]] = None):
        self.issues: List[str] = list(issues or [])
        detail = "; ".join(self.issues)
        super().__init__(f"{message}: {detail}" if detail else message)


class UnknownScenarioError(ConfigError):
    pass


class DimensionError(EsDrlError, ValueError):
    pass


class StaleCacheError(EsDrlError, ValueError):
    pass


class DivergenceError(EsDrlError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""


class ActionBoxError(EsDrlError, ValueError):
    pass


class FeedbackError(EsDrlError, ArithmeticError):
    """A controller or integrator received a non-finite cost or gradient."""


class CheckpointError(EsDrlError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass
