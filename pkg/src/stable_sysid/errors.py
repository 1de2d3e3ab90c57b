"""Exception hierarchy shared by every module of the package."""


class SysIdError(Exception):
    """Base class for all errors raised by stable_sysid."""


class DimensionError(SysIdError, ValueError):
    """Operand shapes are not conformable."""


class ContractError(SysIdError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericalError(SysIdError, ArithmeticError):
    """A numerical routine failed (non-convergence, non-finite values, ...)."""


class SingularMatrixError(NumericalError):
    """A matrix that must be inverted is numerically singular."""

    def __init__(self, message, site=None):
        super().__init__(message if site is None else f"{message} [site: {site}]")
        self.site = site


class ParseError(SysIdError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class StabilityViolation(SysIdError, AssertionError):
    """A parametrized A matrix left its guaranteed spectral bound (should be impossible)."""
