"""Exception hierarchy shared by every align_lab module."""


class AlignLabError(Exception):
    """Base class for all library errors."""


class ShapeError(AlignLabError, ValueError):
    pass


class NonFiniteError(AlignLabError, ValueError):
    pass


class DecompositionError(AlignLabError):
    """The underlying SVD / eigendecomposition routine failed to converge."""


class EmptyRankError(AlignLabError):
    """No singular value survived the rank threshold."""


class DivergenceError(AlignLabError):
    """Training produced a loss above the divergence guard or a non-finite value."""

    def __init__(self, message, step=None, loss=None):
        super().__init__(message)
        self.step = step
        self.loss = loss


class PreconditionError(AlignLabError):
    pass


class CertificateError(AlignLabError):
    """A convergence envelope was violated at a specific (index, step)."""

    def __init__(self, message, k=None, t=None):
        super().__init__(message)
        self.k = k
        self.t = t


class InfeasibleError(AlignLabError):
    pass


class RankError(AlignLabError):
    pass


class IdxFormatError(AlignLabError, ValueError):
    """Malformed MNIST IDX container."""


class DataMissingError(AlignLabError, FileNotFoundError):
    pass
