"""Exception hierarchy shared by all modules."""


class PhyAdvError(Exception):
    """Base class for testbed errors."""


class ConfigError(PhyAdvError, ValueError):
    """Invalid configuration, shape mismatch or out-of-range argument."""


class StateError(PhyAdvError, RuntimeError):
    """Operation called in the wrong state (e.g. backward without a recorded pass)."""


class FormatError(PhyAdvError, ValueError):
    """Malformed, truncated or version-mismatched binary file."""


class NumericError(PhyAdvError, ArithmeticError):
    """Non-finite values reached an optimizer or metric."""


class TrainingError(NumericError):
    """Training diverged. ``epoch`` holds the epoch/step index where it happened."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ReportError(PhyAdvError, ValueError):
    """Artifacts cannot be turned into a fair report (e.g. mismatched attack budgets)."""
