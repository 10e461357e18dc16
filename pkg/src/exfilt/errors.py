"""Exception types shared across the package."""


class ExfiltError(Exception):
    """Base class for all package errors."""


class SchemaError(ExfiltError, ValueError):
    """Data does not match the declared feature/class schema."""


class ConfigError(ExfiltError, ValueError):
    """Invalid or infeasible configuration."""


class TrainingError(ExfiltError, RuntimeError):
    """Training diverged (non-finite parameters) or got unusable input."""


class BudgetExhausted(ExfiltError):
    """The oracle refused a batch because it would exceed the query budget."""

    def __init__(self, requested, remaining):
        super().__init__(f"query budget exhausted: requested {requested}, remaining {remaining}")
        self.requested = requested
        self.remaining = remaining


class InvalidQuery(ExfiltError, ValueError):
    """A query batch contained samples outside the feature domain."""

    def __init__(self, rows, detail=""):
        msg = f"invalid query rows {list(rows)}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.rows = list(rows)


class TransportError(ExfiltError, ConnectionError):
    """A remote oracle could not be reached or returned garbage."""


class CalibrationError(ExfiltError, RuntimeError):
    """Threshold calibration produced no usable distances."""
