"""Exception hierarchy.

Configuration problems map to CLI exit code 2, numerical failures to 3.
"""


class BerrylineError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class ConfigError(BerrylineError, ValueError):
    """Invalid model, distribution, or run configuration."""

    exit_code = 2


class NumericalError(BerrylineError, RuntimeError):
    """A computation could not be carried out to the requested accuracy."""


class ModelDegeneracyError(NumericalError):
    """Two instantaneous levels come closer than the degeneracy threshold."""


class GridTooCoarseError(NumericalError):
    """Eigenvector tracking between neighbouring grid points is ambiguous."""


class RuntimeTooLargeError(NumericalError):
    """The propagator would need more steps than the hard cap allows."""


class PhaseUndefinedError(NumericalError):
    """The wave-operator amplitude vanished, so its argument is undefined."""


class AmbiguousLiftError(NumericalError):
    """A mod-pi estimate sits on the edge of the lifting interval."""


class UnliftedEstimateError(NumericalError, TypeError):
    """Richardson extrapolation was given estimates without branch metadata."""


class BranchResolutionError(NumericalError):
    """Coarse branch resolution did not stabilise."""


class UnsupportedOrderError(BerrylineError, ValueError):
    """Requested APT order is not available in closed form."""

    exit_code = 2


class PipelineInconsistentError(NumericalError):
    """An end-to-end pipeline produced an estimate outside its own branch."""


class DroppedSamplesError(NumericalError):
    """Too many randomized samples had an undefined phase."""
