"""Exception hierarchy shared by the whole package.

ConfigError-family failures map to CLI exit code 2 (and HTTP 400),
NumericalError to exit code 3 (and HTTP 500).
"""


class PackPTQError(Exception):
    """Base class for all packptq errors."""


class ShapeError(PackPTQError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(PackPTQError):
    """Bad usage: unknown architecture, missing file, invalid config values."""


class SchemaError(ConfigError):
    """A JSON document failed validation; ``path`` points at the offender."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class InfeasibleBudgetError(ConfigError):
    """Memory budget below the cheapest feasible allocation."""

    def __init__(self, budget: float, min_cost: float):
        self.budget = budget
        self.min_cost = min_cost
        super().__init__(
            f"budget {budget} is infeasible; minimum achievable cost is {min_cost}"
        )


class NumericalError(PackPTQError):
    """Non-finite values or diverging optimization."""
