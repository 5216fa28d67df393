"""Exception hierarchy shared across the package."""


class GfwsvdError(Exception):
    """Base class for all errors raised by :mod:`gfwsvd`."""


class ValidationError(GfwsvdError, ValueError):
    """An argument violates a documented precondition."""


class NonFiniteError(ValidationError):
    """A tensor contains NaN or Inf entries."""


class TensorFormatError(GfwsvdError):
    """A ``.gft`` file cannot be decoded."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class UnsupportedRankError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    """The payload is shorter than the header dims require."""


class TrailingDataError(TensorFormatError):
    """Bytes remain after the payload described by the header."""


class DefinitenessError(GfwsvdError, ValueError):
    """A matrix expected to be positive definite is not (even after jitter)."""


class SingularMatrixError(GfwsvdError, ValueError):
    """A triangular factor has a zero on its diagonal."""


class SizeCapError(ValidationError):
    """A dense materialization would exceed the desk-scale cap."""


class ConvergenceError(GfwsvdError):
    """An iterative solver stopped before reaching its tolerance."""


class TrainingDivergedError(GfwsvdError):
    """The training loss became non-finite."""


class InfeasibleTargetError(ValidationError):
    """A compression budget cannot be met even at rank 1."""


class GateError(GfwsvdError):
    """A structured result disagrees with its reference before benchmarking."""
