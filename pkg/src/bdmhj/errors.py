"""Exception and warning types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericalError -> 3,
OSError -> 4.
"""


class BdmhjError(Exception):
    """Base class for all package errors."""


class ConfigError(BdmhjError, ValueError):
    """Invalid configuration or violated precondition on user input.

    ``errors`` holds every problem found, each as a ``(key_path, message)`` pair,
    so validation can report all of them at once.
    """

    def __init__(self, message, errors=None):
        self.errors = list(errors or [])
        if self.errors and not message:
            message = "; ".join(f"{k}: {m}" for k, m in self.errors)
        super().__init__(message)


class NumericalError(BdmhjError, ArithmeticError):
    """A numerical routine failed (quadrature, overflow, stability)."""


class CFLViolationError(NumericalError):
    """Explicit time step exceeds the stability bound of the monotone scheme."""


class InvariantViolation(BdmhjError, RuntimeError):
    """Internal state became inconsistent (e.g. death at an empty site)."""


class AssumptionWarning(UserWarning):
    """A modelling assumption is not met at the configured parameters."""
