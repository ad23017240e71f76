"""Exception hierarchy shared by every simulator module."""
from typing import Optional


class SimulatorError(Exception):
    """Base class for all errors raised by the simulator."""


class DimensionError(SimulatorError, ValueError):
    pass


class ConfigError(SimulatorError, ValueError):
    """Invalid configuration; `field` names the offending config path when known."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DomainError(SimulatorError, ValueError):
    pass


class NumericError(SimulatorError):
    pass


class DivergenceError(NumericError):
    def __init__(self, round_index: int, client: int, step: int, detail: str = "non-finite iterate"):
        self.round = round_index
        self.client = client
        self.step = step
        super().__init__(f"{detail} at round={round_index} client={client} step={step}")


class InfeasibilityError(SimulatorError):
    def __init__(self, condition: str, value: float):
        self.condition = condition
        self.value = value
        super().__init__(f"infeasible: {condition} (value={value:.6g})")


class AccountingError(SimulatorError):
    pass
