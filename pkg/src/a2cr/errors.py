"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when array shapes or dimensions do not line up."""


class ContractError(RuntimeError):
    """Raised when a caller violates an operation's precondition."""


class NumericalError(FloatingPointError):
    """Raised when a loss or gradient becomes NaN/Inf."""
