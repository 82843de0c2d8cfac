from typing import Optional, Sequence


class MinResError(Exception):
    """Base error; ``exit_code`` is what the command line returns for it."""

    exit_code: int = 3


class InvalidArgumentError(MinResError, ValueError):
    exit_code = 2


class ConfigError(MinResError, ValueError):
    exit_code = 2


class CheckpointError(MinResError, ValueError):
    exit_code = 2


class DomainError(MinResError, ValueError):
    pass


class StateError(MinResError, RuntimeError):
    pass


class RankDeficiencyError(MinResError, ArithmeticError):
    """Near-singular saddle factorization: trial and test spaces are not Fortin-compatible."""

    def __init__(self, message: str, sample_index: Optional[int] = None):
        if sample_index is not None:
            message = f"{message} (sample {sample_index})"
        super().__init__(message)
        self.sample_index = sample_index


class LabelSingularityError(MinResError, ZeroDivisionError):
    pass


class NonFiniteLossError(MinResError, FloatingPointError):
    def __init__(
        self,
        message: str,
        parameter: Optional[Sequence[float]] = None,
        weight_range: Optional[tuple[float, float]] = None,
    ):
        details = []
        if parameter is not None:
            details.append(f"lambda={list(parameter)}")
        if weight_range is not None:
            details.append(f"c in [{weight_range[0]:.3e}, {weight_range[1]:.3e}]")
        if details:
            message = f"{message}: {', '.join(details)}"
        super().__init__(message)
        self.parameter = parameter
        self.weight_range = weight_range


class OracleAccuracyError(MinResError, ArithmeticError):
    pass
