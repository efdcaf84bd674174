"""Exception hierarchy shared by all engine modules.

The CLI maps these onto exit codes: validation problems exit with 2,
numeric blow-ups with 3.
"""


class LorkdError(Exception):
    """Base class for engine errors."""


class ShapeError(LorkdError, ValueError):
    """Tensor shapes or geometry do not compose."""


class ValidationError(LorkdError, ValueError):
    """Bad configuration, bad arguments, or a degenerate model."""


class CheckpointError(LorkdError, ValueError):
    """Malformed or truncated checkpoint container."""


class NumericError(LorkdError, ArithmeticError):
    """A loss or function evaluation became NaN or infinite."""
