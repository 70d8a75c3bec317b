"""hedgelab: local risk-minimization hedging under partial information.

Simulation, filtering, pricing, and hedging for Markovian market models
where the hedger observes the traded asset but not the latent state. The
package covers three model families (diffusion, pure jump, jump-diffusion),
exact and particle filters under the physical and the minimal martingale
measure, a backward PDE solver for the claim value surface, and the
filter-based hedging strategy with its decomposition into a locally
risk-minimizing part and a jump correction.
"""

__version__ = "0.1.0"

from .errors import (
    HedgeLabError, ConfigError, DerivativeMissingError, BoundViolationError,
    MeasureSignError, SignedDensityError, StepSizeError, FilterStateError,
    SupportError, EmptyCloudError, DegeneracyError, OutOfRangeError,
    GridCollisionError, SampleSizeError, SurfaceError,
)

__all__ = [
    "HedgeLabError", "ConfigError", "DerivativeMissingError",
    "BoundViolationError", "MeasureSignError", "SignedDensityError",
    "StepSizeError", "FilterStateError", "SupportError", "EmptyCloudError",
    "DegeneracyError", "OutOfRangeError", "GridCollisionError",
    "SampleSizeError", "SurfaceError", "__version__",
]
