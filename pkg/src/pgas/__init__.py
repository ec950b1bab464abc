"""Particle Gibbs with ancestor sampling for non-Markovian state-space models."""

from .gaussian import (
    GaussianBelief,
    KalmanError,
    Lgssm,
    PartitionedLgssm,
    companion_system,
    exact_smoother,
    kalman_filter,
    random_stable_system,
    sample_joint_smoothing,
)
from .kernels import (
    ChainConfig,
    ChainInterrupted,
    ChainState,
    SampleStore,
    backward_sampling_dist,
    ffbsi,
    mh_parameter_update,
    pgas_iteration,
    pgbs_iteration,
    pmmh_iteration,
    run_chain,
    run_csmc_as,
)
from .model import ModelError, StateSpaceModel, log_gamma, log_h_factor, log_weight_function
from .models import (
    MarginalizedLgssm,
    SvdReducedModel,
    coordinated_turn_model,
    linear_svd_model,
    rbps_system,
    simulate,
    simulate_ct,
)
from .smc import ParticleCollapse, SmcHistory, run_smc, sample_categorical, trace_lineage
from .streams import make_rng, stream
from .truncation import (
    DegenerateBackwardWeights,
    TruncationConfig,
    adaptive_backward_dist,
    kld,
    kld_bound,
    truncated_backward_logweights,
)

__version__ = "0.1.0"
