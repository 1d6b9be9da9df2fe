"""Seeded construction of well-posed random problem instances.

Gradient comparisons only make sense away from activation kinks and with
contractive weights (the block solvers need joint convexity), so the
builders here resample until every pre-activation keeps a safe margin
from the kink set.
"""

import numpy as np

from .energies import ActivationKind, EnergyForm, LayerEnergy, LossFamily, NetworkSpec
from .numeric import glorot_uniform_init, make_rng
from .trainers import (
    MethodKind,
    SpacingMode,
    SpacingSchedule,
    forward_pass,
    method_weight_gradients,
)

__all__ = ["random_smooth_instance", "kink_margin"]

_FORM_FOR_METHOD = {
    "bp": EnergyForm.PENALIZER,
    "mac": EnergyForm.PENALIZER,
    "fenchel-bp": EnergyForm.FENCHEL,
    "gcl": EnergyForm.FENCHEL,
    "lpom": EnergyForm.FENCHEL,
}

_KINKS = {
    ActivationKind.RELU: (0.0,),
    ActivationKind.HARD_SIGMOID: (0.0, 1.0),
    ActivationKind.IDENTITY: (),
    ActivationKind.SOFTMAX: (),
}


def kink_margin(net, x):
    """Smallest distance of any pre-activation to its activation's kink set."""
    state = forward_pass(net, x)
    margin = np.inf
    for j, e in enumerate(net.energies):
        for kink in _KINKS[e.activation]:
            margin = min(margin, float(np.min(np.abs(state.pre[j + 1] - kink))))
    return margin


def _build(dims, activation, form, rng, weight_scale=0.8):
    energies = []
    for j in range(len(dims) - 1):
        w = glorot_uniform_init(dims[j + 1], dims[j], rng)
        # shift towards positive entries so hidden layers keep live units
        w = w + 0.5 * np.sqrt(6.0 / (dims[j + 1] + dims[j]))
        spectral = np.linalg.norm(w, 2)
        if spectral > weight_scale:
            w = w * (weight_scale / spectral)
        act = activation if j < len(dims) - 2 else ActivationKind.IDENTITY
        energies.append(LayerEnergy(form, act, w))
    return NetworkSpec(dims, energies, LossFamily.SQUARED_ERROR)


def _bp_layer_scales(net, x, y):
    """Max-magnitude of the exact nested-objective gradient per layer."""
    twin = NetworkSpec(
        net.layer_dims,
        [LayerEnergy(EnergyForm.PENALIZER, e.activation, e.weights) for e in net.energies],
        net.loss_family,
    )
    sched = SpacingSchedule.uniform(twin.depth, 1.0, SpacingMode.TAU)
    grads = method_weight_gradients(twin, x, y, MethodKind.BP, sched)
    return [float(np.max(np.abs(g))) for g in grads]


def random_smooth_instance(dims, activation, method, seed, margin=0.05, attempts=500,
                           target_scale=1.0):
    """Random net, input and target whose pre-activations avoid all kinks
    and whose nested-objective gradient is nonzero at every layer.

    ``method`` may be a MethodKind or its CLI name; it determines the
    energy form.  The weights are rescaled to spectral norm <= 0.8 so
    block solvers contract.  ``target_scale`` inflates the loss gradient;
    a negative scale puts targets below the attainable outputs, whose
    large downward signals cross activation boundaries at finite spacing
    and expose the finite-spacing bias.  Raises if no admissible draw is
    found.
    """
    name = getattr(method, "value", method)
    form = _FORM_FOR_METHOD[name]
    for attempt in range(attempts):
        rng = make_rng(seed * 1_000_003 + attempt)
        net = _build(dims, activation, form, rng)
        x = rng.uniform(0.1, 1.0, size=dims[0])
        y = target_scale * rng.uniform(0.0, 1.0, size=dims[-1])
        if kink_margin(net, x) < margin:
            continue
        if min(_bp_layer_scales(net, x, y)) < 1e-6:
            continue
        return net, x, y
    raise RuntimeError(
        f"no kink-free instance found in {attempts} attempts for dims {dims}"
    )
