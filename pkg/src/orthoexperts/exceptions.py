"""Exception hierarchy.

``ValidationError`` covers everything wrong with the *inputs* (shapes, ranks,
parameter ranges, infeasible assignments, degenerate data). Callers that need
finer granularity can catch the subclasses. ``NumericInvariantError`` is
different in kind: inputs were fine, but a numerical post-condition failed.
"""


class OrthoExpertsError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(OrthoExpertsError, ValueError):
    """Invalid input to an operation."""


class DimensionError(ValidationError):
    """Operands have incompatible or unsupported shapes."""


class InvalidRankError(ValidationError):
    """Requested rank is outside the admissible range."""


class CapacityError(ValidationError):
    """The expert capacity r*K cannot be satisfied by the given matrix."""


class InvalidParameterError(ValidationError):
    """A scalar parameter is out of range."""


class ConstraintError(ValidationError):
    """An assignment violates its row/column-sum constraints."""


class DegenerateInputError(ValidationError):
    """Input too degenerate for the operation (non-finite, or too few usable vectors)."""


class DivisionHazardError(ValidationError):
    """A rescaling denominator is numerically zero."""


class ModeError(ValidationError):
    """Operation invoked in a mode that does not support it."""


class NumericInvariantError(OrthoExpertsError, ArithmeticError):
    """A numerical post-condition failed on otherwise valid input."""
