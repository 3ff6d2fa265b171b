"""Exception types shared across the package.

ConfigError maps to CLI exit code 1, everything else to 2.
"""


class PsinetError(Exception):
    """Base class for all package errors."""


class ShapeError(PsinetError, ValueError):
    """Operand shapes incompatible with the requested operation."""


class NumericError(PsinetError, ArithmeticError):
    """NaN/Inf encountered where finite values are required."""


class ConfigError(PsinetError, ValueError):
    """Invalid configuration (bad field values, cross-field inconsistency)."""


class StateError(PsinetError, RuntimeError):
    """Operation invoked in an invalid state (e.g. eval with untrained stats)."""


class FormatError(PsinetError, ValueError):
    """Malformed on-disk data (checkpoint container, dataset files)."""


class AlignmentError(PsinetError, ValueError):
    """Parameter/gradient or cross-model alignment mismatch."""


class InvarianceError(PsinetError, ValueError):
    """Requested transform would violate a structural invariance."""
