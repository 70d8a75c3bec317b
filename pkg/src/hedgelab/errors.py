"""Exception taxonomy shared across the package.

Every failure mode that a caller might want to catch separately gets its
own class. All of them derive from HedgeLabError so the CLI can map any
numerical fault to a single exit code.
"""


class HedgeLabError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(HedgeLabError):
    """Bad or incomplete scenario configuration."""


class DerivativeMissingError(HedgeLabError):
    """A required partial derivative is unavailable and finite differences
    were not permitted for the field in question."""


class BoundViolationError(HedgeLabError):
    """A coefficient left its declared bound band at a sampled point."""


class MeasureSignError(HedgeLabError):
    """A tilted jump weight went negative: the martingale-measure tilt
    1 - alpha*z*weight stopped being a probability rescaling."""


class SignedDensityError(HedgeLabError):
    """The pathwise change-of-measure density hit a nonpositive jump
    factor; the path cannot carry starred statistics."""


class StepSizeError(HedgeLabError):
    """The time step is too coarse for the requested operation (explicit
    stability limit exceeded, or a positivity-preserving update failed)."""


class FilterStateError(HedgeLabError):
    """A filter state was passed in unnormalized or otherwise malformed."""


class SupportError(HedgeLabError):
    """An observation has zero likelihood under every hypothesis the
    filter carries."""


class EmptyCloudError(HedgeLabError):
    """A particle operation was requested on an empty cloud."""


class DegeneracyError(HedgeLabError):
    """A denominator that the model assumptions promise to be positive
    vanished (no jump activity and no diffusion at a node, etc.)."""


class OutOfRangeError(HedgeLabError):
    """A lookup left the tabulated grid and extrapolation is not allowed."""


class GridCollisionError(HedgeLabError):
    """Jump atoms landed closer than the pooling tolerance allows while
    being declared distinct."""


class SampleSizeError(HedgeLabError):
    """Too few samples / paths for the requested statistic."""


class SurfaceError(HedgeLabError):
    """A value surface is missing a required derivative sheet."""
