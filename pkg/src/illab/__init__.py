"""Contrastive-surrogate training methods for feed-forward networks.

One family of objectives covers standard back-propagation, Fenchel
back-propagation, global contrastive (Hebbian) learning, quadratic-penalty
inference (MAC / predictive coding) and lifted proximal operator machines;
every method's gradient is cross-checked against finite differences of the
underlying nested objective.
"""

from .numeric import (
    make_rng,
    glorot_uniform_init,
    negative_init,
    sgd_step,
    finite_difference_gradient,
)
from .energies import (
    ActivationKind,
    EnergyForm,
    ConjugatePair,
    conjugate_pair,
    conjugate_eval,
    LayerEnergy,
    NetworkSpec,
    LossFamily,
    SquaredError,
    CrossEntropyOnSoftmaxOutput,
    AbsoluteValue,
    make_loss,
    forward_map,
    energy_eval,
    tilde_energy,
    grad_tilde_wrt_lower,
    loss_eval,
    loss_grad,
)
from .bilevel import (
    BilevelProblem,
    QpInstance,
    ActiveConstraintError,
    ConvergenceError,
    free_minimizer,
    clamped_minimizer,
    linearized_minimizer,
    contrastive_surrogate_value,
    linearized_surrogate_value,
    directional_derivative_qp,
    qp_kkt_residuals,
    qp_instance_for_relu_problem,
    relu_one_sided_derivative,
    implicit_diff_gradient,
    surrogate_parameter_gradient,
)
from .trainers import (
    SpacingMode,
    SpacingSchedule,
    ActivationState,
    MethodKind,
    forward_pass,
    deep_loss,
    free_phase,
    clamped_phase,
    gcl_weight_gradient,
    mac_energy,
    mac_infer,
    mac_weight_gradient,
    mu_from_lcl,
    mu_from_gcl,
    lpom_objective,
    lpom_infer_layer,
    lpom_infer,
    lpom_weight_gradient,
    bp_backward_pass,
    bp_weight_gradient,
    fenchel_backward_pass,
    fenchel_weight_gradient,
    linearized_local_surrogate_value,
    adaptive_tau,
    method_weight_gradients,
    train_step,
)
from .data import (
    Dataset,
    Metrics,
    load_mnist_idx,
    one_hot,
    two_moons,
    synthetic_digits,
    run_training,
    evaluate,
    write_metrics_csv,
    read_metrics_csv,
)

__version__ = "0.1.0"
