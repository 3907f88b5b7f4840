"""Exception types shared across the package.

The CLI maps :class:`PreconditionError` to exit code 1 and
:class:`NumericalError` to exit code 2.
"""


class PreconditionError(ValueError):
    """Input violates a documented precondition."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (solver residual, stall, degenerate ratio)."""
