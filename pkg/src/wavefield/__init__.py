"""Sound field reconstruction from sparse room impulse response measurements.

A wave-equation-constrained neural field learns the pressure p(x, y, t) of a
room from a few measured positions and interpolates it anywhere in the
aperture; classical sparse-regression baselines (time-domain spherical waves,
frequency-domain plane waves) and a mirror-image room simulator provide
reference solutions and test oracles.
"""

__version__ = "0.1.0"

from .autodiff import Jet2, JetBatch, Tape, Tensor, finite_diff_probe
from .network import NetConfig, forward, forward_jet, init_siren

__all__ = [
    "Jet2",
    "JetBatch",
    "Tape",
    "Tensor",
    "finite_diff_probe",
    "NetConfig",
    "forward",
    "forward_jet",
    "init_siren",
    "__version__",
]
