class ShapeError(ValueError):
    """Operands do not conform to an operation's shape rules."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""
