"""Gradient algorithms for fixed-point recurrent networks.

Two estimators of the same objective gradient (the cost at the free
fixed point of a layered energy network): recurrent backpropagation,
which integrates an error-derivative side process at the frozen fixed
point, and equilibrium propagation, which reads the gradient off a
second, nudged relaxation.  The package also ships the independent
finite-difference oracles and the matched-grid harness that quantifies
how the two second phases coincide step by step.
"""

from .dynamics import (
    RelaxationConfig,
    Trajectory,
    free_path,
    nudged_path,
    relax,
    relax_free,
    relax_nudged,
    write_trajectory_csv,
)
from .eqprop import (
    GradientEstimate,
    TemporalProcessRecord,
    eqprop_gradient,
    temporal_derivative_process,
    truncated_eqprop_gradient,
    write_temporal_csv,
)
from .equivalence import (
    EquivalenceReport,
    beta_sweep,
    compare_processes,
    fit_loglog_slope,
    truncation_correspondence,
    write_equivalence_csv,
)
from .exceptions import (
    BasinJumpError,
    CheckpointError,
    ConfigError,
    ConvergenceError,
    DatasetError,
    DivergenceError,
    FpgradError,
    InstabilityError,
    NotAtFixedPointError,
    ShapeError,
    UnsupportedActivationError,
)
from .model import (
    ACTIVATIONS,
    Activation,
    HARD_SIGMOID,
    LOGISTIC,
    NetworkShape,
    Params,
    Sample,
    State,
    TANH,
    cost,
    energy,
    get_activation,
    grad_s_augmented,
    grad_s_cost,
    grad_s_energy,
    grad_theta_cost,
    grad_theta_energy,
    hvp_ss,
    hvp_theta_s,
    init_params,
    random_instance,
)
from .oracle import (
    FDConfig,
    check_backward_identity,
    check_dbeta_energy_identity,
    fd_hvp_ss,
    fd_hvp_theta_s,
    fd_objective_gradient,
    gradient_report,
    projected_cost,
)
from .rbp import ErrorProcessState, rbp_gradient, rbp_init, rbp_step
from .training import (
    Dataset,
    TrainConfig,
    TrainLog,
    load_checkpoint,
    load_dataset,
    predict,
    save_checkpoint,
    sgd_train,
    write_trainlog_csv,
)

__version__ = "0.1.0"
