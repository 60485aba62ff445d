"""Exception and warning types shared across the package."""


class ThresholdCurvesError(Exception):
    """Base class for all package errors."""


class ParameterDomainError(ThresholdCurvesError, ValueError):
    """A model parameter is outside its admissible domain."""


class TimeDomainError(ThresholdCurvesError, ValueError):
    """A time argument is outside (0, inf)."""


class SeriesAccuracyError(ThresholdCurvesError, RuntimeError):
    """A series evaluation could not reach the requested tolerance."""

    def __init__(self, message, achieved_bound=None, terms=None):
        super().__init__(message)
        self.achieved_bound = achieved_bound
        self.terms = terms


class SchemaError(ThresholdCurvesError, ValueError):
    """Dataset schema is malformed or does not match the file."""


class ValidationError(ThresholdCurvesError, ValueError):
    """A data cell failed validation."""


class ShapeError(ThresholdCurvesError, ValueError):
    """Coefficient vectors do not match the dataset dimensions."""


class FitError(ThresholdCurvesError, RuntimeError):
    """Model fitting failed; carries per-start diagnostics when available."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class InformationError(ThresholdCurvesError, RuntimeError):
    """Observed-information evaluation produced non-finite entries."""


class StratumEmptyError(ThresholdCurvesError, ValueError):
    """A weighted stratum has zero total weight."""


class ConfigError(ThresholdCurvesError, ValueError):
    """A run configuration document is invalid."""


class DegenerateDensityWarning(UserWarning):
    """Density underflowed; an analytic limit was substituted."""


class ConditioningWarning(UserWarning):
    """A matrix was singular or ill-conditioned; a pseudo-inverse was used."""


class SeparationWarning(UserWarning):
    """A logistic block was separable; ridge fallback was applied."""


class OptimizerWarning(UserWarning):
    """An inner optimizer stopped early; best iterate was kept."""
