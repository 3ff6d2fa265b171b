"""Single-process federated learning with feature-allocated model regulation."""

from .errors import (
    AlignmentError,
    ConfigError,
    FormatError,
    InvarianceError,
    NumericError,
    PsinetError,
    ShapeError,
    StateError,
)
from .tensor import SGD, Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "SGD",
    "Tape",
    "Tensor",
    "PsinetError",
    "ShapeError",
    "NumericError",
    "ConfigError",
    "StateError",
    "FormatError",
    "AlignmentError",
    "InvarianceError",
    "__version__",
]
