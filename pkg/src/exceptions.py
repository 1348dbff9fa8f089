"""Exception types raised across the training library."""

from typing import List, Optional


class ShapeError(ValueError):
    """Operand shapes are incompatible"""


class ParameterError(ValueError):
    """A scalar parameter is outside its valid range"""


class ContractError(RuntimeError):
    """A caller broke an operation's precondition"""


class NonFiniteValueError(ArithmeticError):
    """An operation produced NaN or Inf"""


class ConfigError(ValueError):
    """Invalid or missing experiment configuration"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the config"""


class TrainingDivergedError(RuntimeError):
    """Training produced a loss above the divergence threshold"""

    def __init__(self, message: str, log: Optional[List] = None):
        self.log = log or []
        super().__init__(message)


class NonFiniteGradientError(TrainingDivergedError):
    """A parameter block received a NaN/Inf gradient"""

    def __init__(self, block: str, log: Optional[List] = None):
        self.block = block
        super().__init__(f"non-finite gradient in parameter block '{block}'", log)
