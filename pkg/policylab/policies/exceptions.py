"""
Error hierarchy shared by the policy and experiment apps.
Every error raised on purpose by the toolkit derives from PolicyLabError.
"""


class PolicyLabError(Exception):
    """Base class for toolkit errors."""


class DimensionMismatchError(PolicyLabError):
    def __init__(self, what, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected dimension {expected}, got {actual}")


class InvariantViolationError(PolicyLabError):
    pass


class HorizonTooShortError(PolicyLabError):
    def __init__(self, message, minimal_horizon=None):
        self.minimal_horizon = minimal_horizon
        if minimal_horizon is not None:
            message = f"{message} (minimal admissible horizon: {minimal_horizon})"
        super().__init__(message)


class OutcomeBoundError(PolicyLabError):
    """Raised when a potential outcome leaves [0, M]."""

    def __init__(self, period, value, cap):
        self.period = period
        self.value = value
        self.cap = cap
        super().__init__(
            f"Outcome {value!r} at period {period} is outside [0, {cap}]; "
            f"the regret guarantee needs bounded nonnegative outcomes"
        )


class EnvironmentExhaustedError(PolicyLabError):
    def __init__(self, period, available):
        self.period = period
        self.available = available
        super().__init__(f"Environment ran out of periods at t={period} (only {available} available)")


class NonFiniteScoreError(PolicyLabError):
    def __init__(self, expert_index, value):
        self.expert_index = expert_index
        super().__init__(f"Non-finite score {value!r} for expert {expert_index}")


class DegenerateCoarseningError(PolicyLabError):
    pass


class MissingCounterfactualsError(PolicyLabError):
    def __init__(self, metric):
        super().__init__(
            f"{metric} needs counterfactual outcomes, which this trajectory does not carry; "
            f"use the realized-welfare figures instead"
        )


class TabularDataError(PolicyLabError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ConfigError(PolicyLabError):
    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        prefix = []
        if field is not None:
            prefix.append(f"field '{field}'")
        if line is not None:
            prefix.append(f"line {line}")
        if prefix:
            message = f"{', '.join(prefix)}: {message}"
        super().__init__(message)


class ReportMismatchError(PolicyLabError):
    pass
