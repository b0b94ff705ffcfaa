"""Exception types shared across the package."""


class FilterMendError(Exception):
    """Base class for every error raised by filtermend."""


class DimensionError(FilterMendError, ValueError):
    """Shapes disagree; ``axis`` names the offending axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class FormatError(FilterMendError, ValueError):
    """A binary file is corrupt, truncated, or carries the wrong magic/version."""


class CollinearityError(FilterMendError, ValueError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class UnreconstructableError(FilterMendError):
    """No lambda on the grid yields a non-empty active set."""


class NoReconstructionBasisError(FilterMendError):
    """Every filter was classified bad, leaving nothing to predict from."""


class TrainingDivergedError(FilterMendError, FloatingPointError):
    pass
