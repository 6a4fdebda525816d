"""Exception types shared across the package."""


class RnflmError(Exception):
    """Base class for all package errors."""


class ShapeError(RnflmError, ValueError):
    """Operand shapes do not conform to an operation."""


class DomainError(RnflmError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class NonFiniteError(RnflmError, ArithmeticError):
    """A NaN or infinity reached a tensor."""


class ContractError(RnflmError, ValueError):
    """A documented precondition was violated by the caller."""


class SingularFlowError(RnflmError, ArithmeticError):
    """A planar flow Jacobian determinant vanished numerically."""


class DegenerateDirectionError(RnflmError, ValueError):
    """A planar flow direction vector ``w`` has (near) zero norm."""


class VocabularyError(RnflmError, ValueError):
    """A token id is outside the vocabulary."""


class ConfigError(RnflmError, ValueError):
    """Invalid or incomplete run configuration."""


class NumericalAbort(RnflmError, ArithmeticError):
    """Training produced a non-finite loss and was stopped."""
