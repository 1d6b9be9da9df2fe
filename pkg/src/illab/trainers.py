"""Deep (L-level) training methods built on contrastive surrogates: global
contrastive two-phase learning (CHL), local contrastive / quadratic-penalty
energies (MAC, PCN), lifted block-convex inference (LPOM), standard
back-propagation, and Fenchel back-propagation with finite targets.

Indexing convention used throughout: activations are a list ``z[0..L]``
with ``z[0]`` the input; energy ``j`` couples ``z[j]`` to ``z[j+1]`` and
owns weight matrix ``W_j``; the spacing value ``s[j]`` belongs to energy
``j``.  State lists are length L+1 and indexed by activation, entry 0
holding the input (or None where meaningless).  All forward/backward
computations accept a single sample ``(d,)`` or a batch ``(B, d)``.
"""

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .bilevel import BilevelProblem, clamped_minimizer
from .energies import (
    ActivationKind,
    EnergyForm,
    activation_forward,
    activation_jacobian_vp,
    activation_slope,
    energy_eval,
    energy_weight_grad,
    tilde_energy,
    grad_tilde_wrt_lower,
)
from .numeric import sgd_step

__all__ = [
    "SpacingMode",
    "SpacingSchedule",
    "ActivationState",
    "MethodKind",
    "forward_pass",
    "deep_loss",
    "free_phase",
    "clamped_phase",
    "gcl_energy",
    "gcl_weight_gradient",
    "mac_energy",
    "mac_infer",
    "mac_weight_gradient",
    "mu_from_lcl",
    "mu_from_gcl",
    "lpom_objective",
    "lpom_infer_layer",
    "lpom_infer",
    "lpom_weight_gradient",
    "bp_backward_pass",
    "bp_weight_gradient",
    "fenchel_backward_pass",
    "fenchel_weight_gradient",
    "linearized_local_surrogate_value",
    "adaptive_tau",
    "method_weight_gradients",
    "train_step",
]


class SpacingMode(enum.Enum):
    BETA = "beta"
    TAU = "tau"


@dataclass
class SpacingSchedule:
    """Per-energy spacing parameters and the derived product weights.

    ``values[j]`` is the spacing of energy j.  The global-contrastive
    weight of energy j is ``1 / prod(values[j:])``.
    """

    values: np.ndarray
    mode: SpacingMode

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if np.any(self.values <= 0.0) or not np.all(np.isfinite(self.values)):
            raise ValueError("spacing parameters must be positive and finite")

    @classmethod
    def uniform(cls, depth, value, mode):
        return cls(np.full(depth, float(value)), mode)

    @property
    def depth(self):
        return self.values.size

    def gcl_weights(self):
        # 1 / prod(values[j:]) computed as a reversed cumulative product
        rev = np.cumprod(self.values[::-1])[::-1]
        if not np.all(np.isfinite(1.0 / rev)):
            raise ValueError("spacing products overflow the global-contrastive weights")
        return 1.0 / rev


@dataclass
class ActivationState:
    """Per-sample network state: forward activations, pre-activations, and
    (after a backward pass) the propagated targets and the spacings that
    produced them."""

    z_star: list
    pre: list
    z_bar: list = None
    effective_tau: list = None
    z_free: list = None
    z_clamped: list = None

    @property
    def output(self):
        return self.z_star[-1]


class MethodKind(enum.Enum):
    BP = "bp"
    FENCHEL_BP = "fenchel-bp"
    GCL = "gcl"
    MAC_LCL = "mac"
    LPOM = "lpom"


# energy forms each method can drive
_METHOD_FORMS = {
    MethodKind.BP: (EnergyForm.PENALIZER,),
    MethodKind.MAC_LCL: (EnergyForm.PENALIZER,),
    MethodKind.FENCHEL_BP: (EnergyForm.FENCHEL, EnergyForm.PROXIMAL),
    MethodKind.GCL: (EnergyForm.FENCHEL, EnergyForm.PROXIMAL),
    MethodKind.LPOM: (EnergyForm.FENCHEL, EnergyForm.PROXIMAL),
}


def check_method_energies(net, method):
    allowed = _METHOD_FORMS[method]
    for j, e in enumerate(net.energies):
        if e.form not in allowed:
            raise ValueError(
                f"{method.value} requires {'/'.join(f.value for f in allowed)} energies, "
                f"energy {j} is {e.form.value}"
            )


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def forward_pass(net, x):
    """Forward states z*_k = f_k(z*_{k-1}) with z*_0 = x."""
    x = np.asarray(x, dtype=float)
    z = [x]
    pre = [None]
    for e in net.energies:
        u = e.pre_activation(z[-1])
        pre.append(u)
        z.append(activation_forward(e.activation, u))
    return ActivationState(z_star=z, pre=pre)


def deep_loss(net, x, y):
    """The nested objective itself: outer loss at the forward output."""
    state = forward_pass(net, x)
    return net.loss_for(y).value(state.output)


def _batchify(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


# ---------------------------------------------------------------------------
# global contrastive phases (free / clamped)
# ---------------------------------------------------------------------------

_SWEEP_TOL = 1e-10
_MAX_SWEEPS = 500
_BLOCK_TOL = 1e-12
_BLOCK_ITERS = 10_000


def gcl_energy(net, z_full, sched, y=None):
    """Weighted energy sum of the free phase; adds the loss when y is given."""
    w = sched.gcl_weights()
    total = 0.0
    for j, e in enumerate(net.energies):
        total = total + w[j] * energy_eval(e, z_full[j + 1], z_full[j])
    if y is not None:
        total = total + net.loss_for(y).value(z_full[-1])
    return total


def _proximal_block_update(e_low, w_low, e_up, w_up, z, z_low, z_up):
    """Projected-gradient minimization of one proximal hidden block."""
    u = e_low.pre_activation(z_low)
    lo, hi = (0.0, np.inf) if e_low.activation is ActivationKind.RELU else (
        (0.0, 1.0) if e_low.activation is ActivationKind.HARD_SIGMOID else (-np.inf, np.inf)
    )
    Wt = e_up.feedback_matrix()
    bias_shift = e_up.pre_activation(np.zeros_like(z)) if e_up.bias else 0.0
    lip = w_low + w_up * np.linalg.norm(Wt, 2) ** 2
    step = 1.0 / lip
    cur = z
    prev_val = np.inf
    for _ in range(_BLOCK_ITERS):
        resid_up = cur @ Wt.T + bias_shift - z_up
        g = w_low * (cur - u) + w_up * (resid_up @ Wt)
        cur = np.clip(cur - step * g, lo, hi)
        val = np.sum(w_low * 0.5 * np.sum((cur - u) ** 2, axis=-1)
                     + w_up * 0.5 * np.sum((cur @ Wt.T + bias_shift - z_up) ** 2, axis=-1))
        if prev_val - val < _BLOCK_TOL:
            break
        prev_val = val
    return cur


def _phase_block_update(net, z_full, k, sched, y):
    """Exact (Fenchel) or iterative (proximal) update of activation k holding
    the neighbours fixed; y is None in the free phase."""
    L = net.depth
    e_low = net.energies[k - 1]
    s = sched.values
    if k == L:
        if y is None:
            z_full[k] = activation_forward(e_low.activation, e_low.pre_activation(z_full[k - 1]))
        else:
            # the top block is exactly the single-level clamped problem
            z_full[k] = _top_clamped(net, z_full[k - 1], y, s[L - 1])
        return
    e_up = net.energies[k]
    if e_low.form is EnergyForm.FENCHEL:
        u = e_low.pre_activation(z_full[k - 1])
        fb = (z_full[k + 1] @ e_up.feedback_matrix())
        z_full[k] = activation_forward(e_low.activation, u + s[k - 1] * fb)
    else:
        w = sched.gcl_weights()
        z_full[k] = _proximal_block_update(
            e_low, w[k - 1], e_up, w[k], z_full[k], z_full[k - 1], z_full[k + 1]
        )


def _top_clamped(net, z_prev, y, spacing):
    e = net.energies[-1]
    single = np.asarray(z_prev).ndim == 1
    if single:
        problem = BilevelProblem(e, z_prev, net.loss_for(y))
        return clamped_minimizer(problem, spacing)
    out = [
        clamped_minimizer(BilevelProblem(e, zp, net.loss_for(yy)), spacing)
        for zp, yy in zip(z_prev, y)
    ]
    return np.stack(out)


def _run_phase(net, x, sched, y):
    if sched.mode is not SpacingMode.BETA:
        raise ValueError("free/clamped phases take a beta-mode schedule")
    if len({e.form for e in net.energies}) > 1:
        raise ValueError("phases require a uniform energy form across layers")
    L = net.depth
    state = forward_pass(net, x)
    z_full = list(state.z_star)
    penalizer = all(e.form is EnergyForm.PENALIZER for e in net.energies)
    if penalizer:
        if y is None:
            return z_full  # forward states minimize the free penalizer energy exactly
        mu = mu_from_gcl(sched)
        inferred = mac_infer(net, x, y, mu)
        return [z_full[0]] + inferred
    prev = float(np.sum(gcl_energy(net, z_full, sched, y)))
    order = list(range(1, L + 1)) + list(range(L, 0, -1))
    for _ in range(_MAX_SWEEPS):
        for k in order:
            _phase_block_update(net, z_full, k, sched, y)
        cur = float(np.sum(gcl_energy(net, z_full, sched, y)))
        if prev - cur < _SWEEP_TOL:
            return z_full
        prev = cur
    warnings.warn("phase sweep budget exhausted; returning best iterate", RuntimeWarning)
    return z_full


def free_phase(net, x, sched):
    """Free solution: minimize the weighted energy sum without the loss."""
    return _run_phase(net, x, sched, None)[1:]


def clamped_phase(net, x, y, sched):
    """Clamped solution: minimize the loss-augmented weighted energy sum."""
    return _run_phase(net, x, sched, y)[1:]


# ---------------------------------------------------------------------------
# global contrastive weight gradient
# ---------------------------------------------------------------------------

def _piecewise_linear(net):
    ok_act = {ActivationKind.IDENTITY, ActivationKind.RELU, ActivationKind.HARD_SIGMOID}
    return all(e.activation in ok_act for e in net.energies)


def _gcl_gradient_compensated(net, x, y, sched):
    """Small-spacing gradient via the exact piecewise-linear correction.

    For tiny spacing products the clamped and free states agree to below
    float resolution, so the naive difference of outer products is pure
    round-off.  Within one linear piece of the activations the clamped
    fixed point is an affine perturbation of the free one, so the
    correction solves exactly and the gradient is assembled from expanded
    difference terms.
    """
    L = net.depth
    s = sched.values
    w = sched.gcl_weights()
    loss = net.loss_for(y)
    # free fixed point by damped-free Gauss-Seidel sweeps
    state = forward_pass(net, x)
    z = list(state.z_star)
    for _ in range(200):
        move = 0.0
        for k in list(range(1, L + 1)) + list(range(L, 0, -1)):
            e_low = net.energies[k - 1]
            u = e_low.pre_activation(z[k - 1])
            if k < L:
                u = u + s[k - 1] * (z[k + 1] @ net.energies[k].feedback_matrix())
            new = activation_forward(e_low.activation, u)
            move = max(move, float(np.max(np.abs(new - z[k]), initial=0.0)))
            z[k] = new
        if move < 1e-15:
            break
    # local slopes of the active linear pieces at the free point
    pre_free = []
    for k in range(1, L + 1):
        e_low = net.energies[k - 1]
        u = e_low.pre_activation(z[k - 1])
        if k < L:
            u = u + s[k - 1] * (z[k + 1] @ net.energies[k].feedback_matrix())
        pre_free.append(u)
    slopes = [activation_slope(net.energies[k - 1].activation, pre_free[k - 1]) for k in range(1, L + 1)]
    # Gauss-Seidel on the exact affine correction system
    delta = [np.zeros_like(z[k]) for k in range(L + 1)]
    for _ in range(200):
        move = 0.0
        for k in list(range(1, L + 1)) + list(range(L, 0, -1)):
            Wk = net.energies[k - 1].feedback_matrix()
            drive = delta[k - 1] @ Wk.T
            if k < L:
                drive = drive + s[k - 1] * (delta[k + 1] @ net.energies[k].feedback_matrix())
                new = slopes[k - 1] * drive
            else:
                new = (drive + s[L - 1] * (loss.target - z[L])) / (1.0 + s[L - 1])
            move = max(move, float(np.max(np.abs(new - delta[k]), initial=0.0)))
            delta[k] = new
        if move == 0.0 or move < 1e-18:
            break
    grads = []
    for j, e in enumerate(net.energies):
        zp = e.augment(z[j])
        dp = np.concatenate([delta[j], [0.0]]) if e.bias else delta[j]
        expanded = (
            np.outer(delta[j + 1], zp)
            + np.outer(z[j + 1], dp)
            + np.outer(delta[j + 1], dp)
        )
        grads.append(-w[j] * expanded)
    return grads


def gcl_weight_gradient(net, x, y, sched, compensated=None):
    """Per-layer gradient of the global contrastive objective.

    The straightforward path differences dE/dW between the clamped and
    free solutions with the product weights.  When the spacing products
    fall below float resolution of the phase difference and the network is
    piecewise linear with a squared loss, an exact correction path is used
    instead (see _gcl_gradient_compensated); pass ``compensated`` to force
    either path.
    """
    check_method_energies(net, MethodKind.GCL)
    if compensated is None:
        tiny = 1.0 / float(sched.gcl_weights().max())  # smallest spacing product
        compensated = (
            tiny < 1e-6
            and _piecewise_linear(net)
            and all(e.form is EnergyForm.FENCHEL for e in net.energies)
            and type(net.loss_for(y)).__name__ == "SquaredError"
        )
    if compensated:
        return _gcl_gradient_compensated(net, x, y, sched)
    w = sched.gcl_weights()
    free = [np.asarray(x, dtype=float)] + free_phase(net, x, sched)
    clamped = [np.asarray(x, dtype=float)] + clamped_phase(net, x, y, sched)
    grads = []
    for j, e in enumerate(net.energies):
        g_hat = energy_weight_grad(e, clamped[j + 1], clamped[j])
        g_free = energy_weight_grad(e, free[j + 1], free[j])
        grads.append(w[j] * (g_hat - g_free))
    return grads


# ---------------------------------------------------------------------------
# MAC / PCN quadratic-penalty energy
# ---------------------------------------------------------------------------

def mu_from_lcl(sched):
    """Penalty multipliers under the local-contrastive reading, mu_j = 1/s_j."""
    return 1.0 / sched.values


def mu_from_gcl(sched):
    """Penalty multipliers under the global-contrastive reading,
    1/mu_j = prod(s[j:])."""
    return sched.gcl_weights()


def mac_energy(net, z, x, y, mu):
    """Quadratic-penalty energy: loss at the top plus weighted layer residuals."""
    check_method_energies(net, MethodKind.MAC_LCL)
    mu = np.asarray(mu, dtype=float)
    full = [np.asarray(x, dtype=float)] + list(z)
    total = net.loss_for(y).value(full[-1])
    for j, e in enumerate(net.energies):
        total = total + mu[j] * energy_eval(e, full[j + 1], full[j])
    return total


def mac_infer(net, x, y, mu, steps=50):
    """Gradient-descent inference of the activations of the penalty energy.

    The subproblem is not layerwise convex, so plain gradient steps with a
    conservative step size are used, warm-started from the forward states.
    """
    mu = np.asarray(mu, dtype=float)
    loss = net.loss_for(y)
    state = forward_pass(net, x)
    z = list(state.z_star)
    L = net.depth
    step = 0.1 / float(mu.max())
    for _ in range(steps):
        grads = [None] * (L + 1)
        for k in range(1, L + 1):
            e_low = net.energies[k - 1]
            u = e_low.pre_activation(z[k - 1])
            g = mu[k - 1] * (z[k] - activation_forward(e_low.activation, u))
            if k < L:
                e_up = net.energies[k]
                u_up = e_up.pre_activation(z[k])
                resid = z[k + 1] - activation_forward(e_up.activation, u_up)
                back = activation_jacobian_vp(e_up.activation, u_up, resid)
                g = g - mu[k] * (back @ e_up.feedback_matrix())
            else:
                g = g + loss.grad(z[k])
            grads[k] = g
        for k in range(1, L + 1):
            z[k] = z[k] - step * grads[k]
    return z[1:]


def mac_weight_gradient(net, x, y, mu, steps=50):
    """dE/dW of the penalty energy at the inferred activations."""
    z = [np.asarray(x, dtype=float)] + mac_infer(net, x, y, mu, steps=steps)
    mu = np.asarray(mu, dtype=float)
    return [
        mu[j] * energy_weight_grad(e, z[j + 1], z[j])
        for j, e in enumerate(net.energies)
    ]


# ---------------------------------------------------------------------------
# LPOM block-convex inference
# ---------------------------------------------------------------------------

def lpom_objective(net, z, x, y, sched):
    """Lifted objective: loss at the top plus spacing-weighted reduced energies."""
    check_method_energies(net, MethodKind.LPOM)
    full = [np.asarray(x, dtype=float)] + list(z)
    total = net.loss_for(y).value(full[-1])
    for j, e in enumerate(net.energies):
        total = total + tilde_energy(e, full[j + 1], full[j]) / sched.values[j]
    return total


def lpom_infer_layer(net, z, x, y, k, sched, tol=1e-10, max_iter=_BLOCK_ITERS):
    """Exact block minimization over activation k (1-based), neighbours fixed.

    Hidden blocks couple the local reduced energy with the conjugate term
    of the layer above and are solved by projected gradient; the top block
    is the single-level clamped problem.  ``z`` lists activations 1..L.
    """
    L = net.depth
    if not 1 <= k <= L:
        raise ValueError(f"layer index must be in 1..{L}, got {k}")
    full = [np.asarray(x, dtype=float)] + [np.asarray(zz, dtype=float) for zz in z]
    return _lpom_block(net, full, k, y, sched, tol=tol, max_iter=max_iter)


def _lpom_block(net, full, k, y, sched, tol=1e-10, max_iter=_BLOCK_ITERS):
    L = net.depth
    s = sched.values
    e_low = net.energies[k - 1]
    u = e_low.pre_activation(full[k - 1])
    if k == L:
        return _top_clamped(net, full[k - 1], y, s[L - 1])
    e_up = net.energies[k]
    Wt = e_up.feedback_matrix()
    bias_shift = e_up.pre_activation(np.zeros_like(full[k])) if e_up.bias else 0.0
    lo, hi = (0.0, np.inf) if e_low.activation is ActivationKind.RELU else (
        (0.0, 1.0) if e_low.activation is ActivationKind.HARD_SIGMOID else (-np.inf, np.inf)
    )
    w_low, w_up = 1.0 / s[k - 1], 1.0 / s[k]
    lip = w_low + w_up * np.linalg.norm(Wt, 2) ** 2
    step = 1.0 / lip
    cur = np.asarray(full[k], dtype=float)
    z_up = full[k + 1]
    for _ in range(max_iter):
        pre_up = cur @ Wt.T + bias_shift
        g = w_low * (cur - u) + w_up * (
            (activation_forward(e_up.activation, pre_up) - z_up) @ Wt
        )
        new = np.clip(cur - step * g, lo, hi)
        if float(np.max(np.abs(new - cur), initial=0.0)) <= tol:
            return new
        cur = new
    warnings.warn("LPOM block iteration budget exhausted", RuntimeWarning)
    return cur


def lpom_infer(net, x, y, sched, sweeps=50, tol=1e-10):
    """Block-coordinate sweeps over all activations, warm-started forward.

    Each block is minimized exactly, so the objective never increases.
    Returns the inferred activations z_1..z_L.
    """
    check_method_energies(net, MethodKind.LPOM)
    state = forward_pass(net, x)
    full = list(state.z_star)
    L = net.depth
    order = list(range(1, L + 1)) + list(range(L, 0, -1))
    prev = lpom_objective(net, full[1:], x, y, sched)
    for _ in range(sweeps):
        for k in order:
            full[k] = _lpom_block(net, full, k, y, sched, tol=tol)
        cur = lpom_objective(net, full[1:], x, y, sched)
        if prev - cur < tol:
            break
        prev = cur
    return full[1:]


def lpom_weight_gradient(net, x, y, sched, sweeps=50):
    """dW of the lifted objective at the inferred activations."""
    full = [np.asarray(x, dtype=float)] + lpom_infer(net, x, y, sched, sweeps=sweeps)
    grads = []
    for j, e in enumerate(net.energies):
        u = e.pre_activation(full[j])
        resid = activation_forward(e.activation, u) - full[j + 1]
        grads.append(np.outer(resid, e.augment(full[j])) / sched.values[j])
    return grads


# ---------------------------------------------------------------------------
# back-propagation as a linearized local method
# ---------------------------------------------------------------------------

def bp_backward_pass(net, state, y, sched):
    """Infinitesimal error signals eps_k = z_bar_k - z*_k of the penalizer
    family: eps_L = -tau_L l'(z*_L), then scaled Jacobian transposes."""
    check_method_energies(net, MethodKind.BP)
    if sched.mode is not SpacingMode.TAU:
        raise ValueError("back-propagation takes a tau-mode schedule")
    L = net.depth
    s = sched.values
    loss = net.loss_for(y)
    eps = [None] * (L + 1)
    eps[L] = -s[L - 1] * loss.grad(state.z_star[L])
    for k in range(L - 1, 0, -1):
        e_up = net.energies[k]
        back = activation_jacobian_vp(e_up.activation, state.pre[k + 1], eps[k + 1])
        eps[k] = (s[k - 1] / s[k]) * (back @ e_up.feedback_matrix())
    return eps


def bp_weight_gradient(net, state, eps, sched):
    """Assemble dLoss/dW_j = (J_f^T (-eps_{j+1}/tau_{j+1})) (z*_j)^T."""
    s = sched.values
    grads = []
    for j, e in enumerate(net.energies):
        delta = activation_jacobian_vp(e.activation, state.pre[j + 1], -eps[j + 1] / s[j])
        grads.append(_scaled_outer(delta, e.augment(state.z_star[j])))
    return grads


def _scaled_outer(err, zp):
    """outer(err, zp) for single samples, batch-mean of outers for batches."""
    if err.ndim == 1:
        return np.outer(err, zp)
    return err.T @ zp / err.shape[0]


# ---------------------------------------------------------------------------
# Fenchel back-propagation
# ---------------------------------------------------------------------------

def adaptive_tau(state, layer_k, feedback, rho=1.0, tau_min=1e-3, delta=1e-12):
    """Per-sample spacing that lets the perturbed pre-activation escape the
    activation's dead zone: tau = max(tau_min, rho*|pre|_inf / |feedback|_inf).

    ``feedback`` is the already tau-scaled signal W^T (z_bar - z*)/tau of
    the layer above; the backward pass perturbs the pre-activation by
    tau * feedback.  Vanishing feedback (below delta) needs no escape and
    caps the spacing at tau_min.
    """
    pre = np.asarray(state.pre[layer_k], dtype=float)
    fb = np.asarray(feedback, dtype=float)
    num = rho * np.max(np.abs(pre), axis=-1)
    den = np.max(np.abs(fb), axis=-1)
    scaled = np.where(den > delta, num / np.maximum(den, delta), 0.0)
    return np.maximum(tau_min, scaled)


def _dead_zone(kind, pre):
    if kind is ActivationKind.RELU:
        return pre <= 0.0
    if kind is ActivationKind.HARD_SIGMOID:
        return (pre <= 0.0) | (pre >= 1.0)
    return np.zeros(np.shape(pre), dtype=bool)


def _unit_escape_tau(kind, pre, feedback, base, rho, tau_min, delta):
    """Per-unit spacing: the base value on live units, an escape value
    rho*|pre_j| / |feedback_j| (floored) inside the activation's dead zone.

    A dead unit whose feedback points into the live region gets a target
    (rho - 1)*|pre_j| past the kink, so its error signal keeps the
    magnitude (1 - 1/rho)*|feedback_j| of a live unit; units pushed
    further into the dead zone stay exactly at the kink value, and live
    units behave like plain Fenchel back-propagation.
    """
    escape = np.maximum(tau_min, rho * np.abs(pre) / np.maximum(np.abs(feedback), delta))
    return np.where(_dead_zone(kind, pre), escape, base)


def fenchel_backward_pass(net, state, y, sched, adaptive=False,
                          rho=2.0, tau_min=1e-3, delta=1e-12):
    """Backward pass of finite targets through perturbed forward problems.

    Fills ``state.z_bar`` and ``state.effective_tau`` and returns the
    target list.  With ``adaptive=True`` the hidden spacings are chosen
    per sample and hidden unit by the escape rule, which keeps vanishing
    pre-activations trainable (dead ReLU units still receive targets).
    """
    check_method_energies(net, MethodKind.FENCHEL_BP)
    if sched.mode is not SpacingMode.TAU:
        raise ValueError("Fenchel back-propagation takes a tau-mode schedule")
    L = net.depth
    s = sched.values
    loss = net.loss_for(y)
    z_bar = [None] * (L + 1)
    taus = [None] * (L + 1)
    z_bar[0] = state.z_star[0]
    g = loss.grad(state.z_star[L])
    taus[L] = s[L - 1]
    e_top = net.energies[L - 1]
    z_bar[L] = activation_forward(e_top.activation, state.pre[L] - taus[L] * g)
    for k in range(L - 1, 0, -1):
        e_up = net.energies[k]
        diff = z_bar[k + 1] - state.z_star[k + 1]
        fb = (diff / _against(taus[k + 1], diff)) @ e_up.feedback_matrix()
        e_low = net.energies[k - 1]
        tau_k = _unit_escape_tau(e_low.activation, state.pre[k], fb, s[k - 1],
                                 rho, tau_min, delta) if adaptive else s[k - 1]
        taus[k] = tau_k
        z_bar[k] = activation_forward(e_low.activation, state.pre[k] + _against(tau_k, fb) * fb)
    state.z_bar = z_bar
    state.effective_tau = taus
    return z_bar


def _against(tau, arr):
    """Broadcast a spacing (scalar, per-sample, or per-unit) against ``arr``."""
    tau = np.asarray(tau, dtype=float)
    if tau.ndim and tau.ndim == np.ndim(arr) - 1:
        return tau[..., None]
    return tau


def fenchel_weight_gradient(net, state, sched):
    """Correct surrogate gradient (1/tau_{j+1}) (z*_{j+1} - z_bar_{j+1}) (z*_j)^T.

    The right-hand factor is always the forward state, never the target;
    mixing in the target looks plausible from the objective but
    differentiates the linearization terms that must be held fixed.
    """
    if state.z_bar is None:
        raise RuntimeError("run fenchel_backward_pass before asking for gradients")
    grads = []
    for j, e in enumerate(net.energies):
        diff = state.z_star[j + 1] - state.z_bar[j + 1]
        err = diff / _against(state.effective_tau[j + 1], diff)
        grads.append(_scaled_outer(err, e.augment(state.z_star[j])))
    return grads


def linearized_local_surrogate_value(net, x, y, sched):
    """Closed-form value of the linearized local contrastive surrogate.

    Computed from one forward and one backward pass; no inference loop."""
    state = forward_pass(net, x)
    z_bar = fenchel_backward_pass(net, state, y, sched)
    L = net.depth
    s = sched.values
    loss = net.loss_for(y)
    g = loss.grad(state.z_star[L])
    val = loss.value(state.z_star[L]) + (z_bar[L] - state.z_star[L]) @ g
    val = val + tilde_energy(net.energies[L - 1], z_bar[L], state.z_star[L - 1]) / s[L - 1]
    for k in range(1, L):
        coupling = grad_tilde_wrt_lower(net.energies[k], z_bar[k + 1], state.z_star[k])
        val = val + (z_bar[k] - state.z_star[k]) @ coupling / s[k]
        val = val + tilde_energy(net.energies[k - 1], z_bar[k], state.z_star[k - 1]) / s[k - 1]
    return float(val)


# ---------------------------------------------------------------------------
# method dispatch and SGD training step
# ---------------------------------------------------------------------------

def method_weight_gradients(net, x, y, method, sched, adaptive=False):
    """Single-sample weight gradients of the chosen method (list per layer)."""
    if method is MethodKind.BP:
        state = forward_pass(net, x)
        eps = bp_backward_pass(net, state, y, sched)
        return bp_weight_gradient(net, state, eps, sched)
    if method is MethodKind.FENCHEL_BP:
        state = forward_pass(net, x)
        fenchel_backward_pass(net, state, y, sched, adaptive=adaptive)
        return fenchel_weight_gradient(net, state, sched)
    if method is MethodKind.GCL:
        return gcl_weight_gradient(net, x, y, sched)
    if method is MethodKind.LPOM:
        return lpom_weight_gradient(net, x, y, sched)
    if method is MethodKind.MAC_LCL:
        return mac_weight_gradient(net, x, y, mu_from_lcl(sched))
    raise ValueError(f"unknown method {method}")


def train_step(net, batch_x, batch_y, method, sched, lr, adaptive=False):
    """One SGD step on a mini-batch; returns the updated network and the
    mean forward loss of the incoming weights.

    Gradients are averaged over the batch in sample order (deterministic
    reduction); BP and Fenchel BP run fully batched, the inference-based
    methods loop over samples.
    """
    check_method_energies(net, method)
    X, _ = _batchify(batch_x)
    Y, _ = _batchify(batch_y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"batch mismatch: {X.shape[0]} inputs vs {Y.shape[0]} targets")
    if method in (MethodKind.BP, MethodKind.FENCHEL_BP):
        state = forward_pass(net, X)
        batch_loss = float(np.mean(net.loss_for(Y).value(state.z_star[-1])))
        if method is MethodKind.BP:
            eps = bp_backward_pass(net, state, Y, sched)
            grads = bp_weight_gradient(net, state, eps, sched)
        else:
            fenchel_backward_pass(net, state, Y, sched, adaptive=adaptive)
            grads = fenchel_weight_gradient(net, state, sched)
    else:
        batch_loss = float(np.mean(net.loss_for(Y).value(forward_pass(net, X).z_star[-1])))
        grads = None
        for i in range(X.shape[0]):
            gi = method_weight_gradients(net, X[i], Y[i], method, sched, adaptive=adaptive)
            grads = gi if grads is None else [a + b for a, b in zip(grads, gi)]
        grads = [g / X.shape[0] for g in grads]
    if lr == 0.0:
        return net.copy(), batch_loss
    new_energies = [
        e.with_weights(sgd_step(e.weights, g, lr)) for e, g in zip(net.energies, grads)
    ]
    out = net.copy()
    out.energies = new_energies
    return out, batch_loss
