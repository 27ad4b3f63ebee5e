"""Federated deep Koopman learning from Kalman-filtered observations.

Clients observe a shared nonlinear system through noisy partial observations,
recover state estimates with an unscented Kalman filter and smoother, train
local deep Koopman networks on the estimates, and a central server merges the
local models with data-size-weighted averaging.
"""

from .config import ExperimentConfig, parse_config, serialize_config, with_overrides
from .dynamics import (
    ObservationModel,
    SystemModel,
    lorenz63,
    make_projection_observer,
    make_system,
    rk4_step,
    simulate_trajectory,
)
from .estimation import (
    GaussianBelief,
    UtParams,
    ekf_filter,
    sigma_points,
    ukf_filter,
    urts_smooth,
    ut_weights,
)
from .evaluation import (
    MetricReport,
    composite_metric,
    estimator_benchmark,
    evaluate_model,
    prediction_error_latent,
    prediction_error_state,
    run_scheme,
)
from .federation import (
    ClientNode,
    Policy,
    RoundRecord,
    ServerState,
    aggregate,
    convergence_coefficient,
    fedavg_m_round,
    observation_phase,
    select_clients,
)
from .koopman import (
    AdamState,
    DknConfig,
    DknParameters,
    adam_step,
    advance,
    build_windows,
    client_update,
    decode,
    dkn_gradients,
    dkn_loss,
    encode,
    init_adam,
    init_dkn,
    load_params,
    lr_decay,
    save_params,
)

__version__ = "0.1.0"
