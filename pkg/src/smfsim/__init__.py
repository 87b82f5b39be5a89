"""Stochastic mean-field dynamics of fermionic one-body densities."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigurationError,
    ConvergenceError,
    DataError,
    ExcessiveAborts,
    NumericalStateError,
    SimulationError,
    TrajectoryAbort,
    UnsupportedOperation,
)
from .model import ModelSpec, NoiseStream, ResidualEnsemble, build_mean_field, contact_potential, sample_sigma  # noqa: E402
from .meanfield import (  # noqa: E402
    SlaterState,
    one_body_entropy,
    quantal_variance,
    rms_radius,
    solve_chf,
    tdhf_step,
)
from .pair import BiorthogonalPair, NoiseDraw, correlation_increment, density_step, pair_step  # noqa: E402
from .lindblad import (  # noqa: E402
    DissipatorSpec,
    PHInteraction,
    build_dissipator_spec,
    dissipator_direct,
    dissipator_lindblad,
    lindblad_step,
    unravel_step,
)
from .ensemble import EnsembleStats, TrajectoryConfig, fit_saturation, run_ensemble  # noqa: E402
