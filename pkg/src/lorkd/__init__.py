"""Low-rank knowledge decomposition of multi-task conv nets, on numpy."""

__version__ = "0.1.0"

from .errors import CheckpointError, LorkdError, NumericError, ShapeError, ValidationError

__all__ = ["CheckpointError", "LorkdError", "NumericError", "ShapeError", "ValidationError", "__version__"]
