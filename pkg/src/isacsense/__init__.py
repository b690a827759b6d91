"""Joint scatterer localization and channel estimation for MIMO-OFDM links."""

from .errors import ConfigError, GeometryError, IsacError, NumericsError, SizeGuardError
from .geometry import (
    ArrayConfig,
    OfdmConfig,
    Region,
    SPEED_OF_LIGHT,
    aoa,
    delay_vector,
    radar_round_trip_delay,
    single_bounce_relative_delay,
    steering_vector,
)
from .scene import (
    Observation,
    PilotSet,
    Scene,
    SceneConfig,
    comm_channel,
    make_pilots,
    noiseless_observation,
    observe,
    radar_channel,
    synthesize_scene,
)
from .grids import (
    AngleDelayGrid,
    GridConfig,
    MeasurementBuilder,
    MeasurementModel,
    PositionGrid,
    SensingParams,
    build_grids,
    compute_T,
)
from .priors import (
    HyperParams,
    MrfParams,
    brute_force_mrf,
    gibbs_support_samples,
    mrf_unnormalized_logp,
    sample_three_layer_prior,
)
from .mrf import MrfBeliefs, inbound, outbound_and_joint, pass_messages, propagate_spatial
from .ifvbi import VariationalState, relaxed_elbo, run_inner
from .mstep import (
    StepControl,
    ThetaPrior,
    grad_theta,
    grad_theta_fd,
    pl_grad_zeta,
    pl_objective,
    surrogate_q_theta,
    update_theta,
    update_zeta,
)
from .estimator import EstimateResult, LinkModel, TurboIfVbiEstimator, check_convergence
from .baselines import exact_elbo, exact_qx, omp_solve, run_variant
from .metrics import (
    MetricsRecord,
    compute_detection,
    compute_nmse,
    compute_rmse,
    evaluate_estimate,
)
from .harness import ExperimentConfig, make_link, preset, read_results, run_cell, sweep

__version__ = "0.1.0"
