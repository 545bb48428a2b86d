"""collapsim: nonlinear deterministic collapse-model simulator.

Simulates quantum measurement as a deterministic nonlinear process: branch
weights of a measurement superposition are pumped between outcomes by the
chaotic dynamics of metastable detectors until a single winner survives
(gambler's ruin), reproducing Born statistics without external noise.

Layers:
  hilbert          finite detector configuration space (grids, operators)
  detector         metastable detector models and hidden-parameter sampling
  dynamics_full    joint-tensor nonlinear branch-block integrator
  dynamics_product locality-structured per-detector factor integrator
  ruin             reduced stochastic pumping game and Born statistics
  scenarios        Stern-Gerlach / Bell-CHSH / GHZ harnesses
  validate, cli    invariant suites and the command-line interface
"""

from .hilbert import (
    BlockMatrix,
    Grid,
    Operator,
    VanishedBranch,
    anticommutator,
    build_momentum_operator,
    build_position_operator,
    gaussian_packet,
    mean_value,
)
from .detector import (
    BiasedDoubleWell,
    DetectorModel,
    Harmonic,
    InitialStateSampler,
    InvertedOscillator,
    KickedOscillator,
    build_hamiltonian,
    lyapunov_probe,
    sample_initial_state,
)
from .dynamics_full import (
    BranchLabel,
    DetectorSpace,
    IntegrationDiverged,
    PumpingMatrix,
    StepSizeUnderflow,
    SystemState,
    WeightVector,
    assemble_initial_state,
    compute_weights,
    detect_collapse,
    no_heating_check,
    pumping_coefficients,
    pumping_rates,
    run_trajectory,
    step,
)
from .dynamics_product import (
    DetectorFactor,
    LocalWeights,
    ProductState,
    assemble_product_state,
    local_mean,
    local_weight_rates,
    local_weights,
    no_heating_check_product,
    reconstruct_global_weights,
    run_product_trajectory,
    step_local,
    step_product,
)
from .ruin import (
    GaussianWhiteNoise,
    NoiseSpec,
    ReplayNoise,
    RuinState,
    TelegraphNoise,
    born_statistics,
    martingale_diagnostic,
    run_batch,
    run_to_collapse,
    sample_noise,
    step_ruin,
)
from .scenarios import (
    CorrelationReport,
    DetectorConfig,
    ScenarioConfig,
    build_bell_amplitudes,
    build_ghz_amplitudes,
    chsh_statistic,
    config_from_dict,
    config_to_dict,
    run_scenario,
)

__version__ = "0.1.0"
