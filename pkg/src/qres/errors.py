"""Exception hierarchy shared by every qres module."""


class QresError(Exception):
    pass


class ShapeError(QresError, ValueError):
    """Tensor dimensions are inconsistent with an operation."""


class ContractError(QresError, ValueError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(QresError, ArithmeticError):
    """A forward operation produced NaN or Inf."""


class FormatError(QresError, ValueError):
    """A container, checkpoint or image file is malformed."""


class DecodeError(FormatError):
    """An entropy-coded stream could not be decoded (e.g. truncated)."""


class CorruptionError(DecodeError):
    """Decoding finished in an inconsistent coder state."""


class TrainingDivergence(QresError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message, step=None, last_good=None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good
