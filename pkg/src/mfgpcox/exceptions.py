"""Exception types raised across the package."""


class ContractError(ValueError):
    """Inputs violate an operation's preconditions (shapes, ranges, ids)."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (non-PSD matrix, non-finite objective).

    ``context`` carries whatever helps reproduce the failure, e.g. the
    hyperparameters in use or an optimizer trace.
    """

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context or {}


class ConfigError(ValueError):
    """A configuration file or section is invalid."""
