"""
Exception hierarchy shared by all services.

Services subclass UsageError for invalid input and NumericalError for
failures of factorizations, quadratures or conditioning; the CLI maps the
two families to exit codes 1 and 2.
"""


class GffLabError(Exception):
    """Base class for all gfflab errors."""

    pass


class UsageError(GffLabError, ValueError):
    """Invalid arguments or configuration."""

    pass


class NumericalError(GffLabError, ArithmeticError):
    """A numerical procedure failed or its result cannot be trusted."""

    pass
