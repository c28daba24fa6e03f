"""Super-localized multiscale finite elements for Gross-Pitaevskii
ground states and dynamics."""

__version__ = "0.1.0"

from . import mesh, fem, slod, nonlinear, groundstate, dynamics, harness

__all__ = ["mesh", "fem", "slod", "nonlinear", "groundstate", "dynamics",
           "harness", "__version__"]
