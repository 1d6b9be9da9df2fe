"""Per-layer energies in the three interchangeable forms (penalizer,
Fenchel-conjugate, proximal), their forward maps, reduced energies and the
partial derivatives every trainer needs.

A layer couples an upper activation ``z`` to a lower one ``z_prev`` through
a trainable matrix ``W``.  All evaluators accept a single vector or a batch
with samples along the leading axis; reductions run over the last axis.
"""

import enum

import numpy as np

__all__ = [
    "ActivationKind",
    "EnergyForm",
    "ConjugatePair",
    "conjugate_pair",
    "LayerEnergy",
    "NetworkSpec",
    "LossFamily",
    "SquaredError",
    "CrossEntropyOnSoftmaxOutput",
    "AbsoluteValue",
    "make_loss",
    "forward_map",
    "energy_eval",
    "conjugate_eval",
    "tilde_energy",
    "grad_tilde_wrt_lower",
    "loss_eval",
    "loss_grad",
    "activation_forward",
    "activation_slope",
    "activation_jacobian_vp",
    "logsumexp",
]


class ActivationKind(enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"
    HARD_SIGMOID = "hardsigmoid"
    SOFTMAX = "softmax"


class EnergyForm(enum.Enum):
    PENALIZER = "penalizer"
    FENCHEL = "fenchel"
    PROXIMAL = "proximal"


# ---------------------------------------------------------------------------
# activations and conjugate pairs
# ---------------------------------------------------------------------------

def logsumexp(u):
    """Numerically stable log(sum(exp(u))) over the last axis."""
    u = np.asarray(u, dtype=float)
    m = np.max(u, axis=-1, keepdims=True)
    return np.squeeze(m, axis=-1) + np.log(np.sum(np.exp(u - m), axis=-1))


def softmax(u):
    u = np.asarray(u, dtype=float)
    e = np.exp(u - np.max(u, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def activation_forward(kind, u):
    """The forward map f(u) = argmin_z E(z, .) expressed on pre-activations."""
    u = np.asarray(u, dtype=float)
    if kind is ActivationKind.IDENTITY:
        return u.copy()
    if kind is ActivationKind.RELU:
        return np.maximum(u, 0.0)
    if kind is ActivationKind.HARD_SIGMOID:
        return np.clip(u, 0.0, 1.0)
    if kind is ActivationKind.SOFTMAX:
        return softmax(u)
    raise ValueError(f"unknown activation {kind}")


def activation_slope(kind, u):
    """Elementwise derivative of the forward map, with f'(kink) := 0.

    Softmax has a coupled Jacobian; use :func:`activation_jacobian_vp`.
    """
    u = np.asarray(u, dtype=float)
    if kind is ActivationKind.IDENTITY:
        return np.ones_like(u)
    if kind is ActivationKind.RELU:
        return (u > 0.0).astype(float)
    if kind is ActivationKind.HARD_SIGMOID:
        return ((u > 0.0) & (u < 1.0)).astype(float)
    raise ValueError(f"{kind} has no elementwise slope")


def activation_jacobian_vp(kind, u, v):
    """Jacobian-transpose-vector product f'(u)^T v of the forward map."""
    if kind is ActivationKind.SOFTMAX:
        s = softmax(u)
        sv = np.sum(s * v, axis=-1, keepdims=True)
        return s * (v - sv)
    return activation_slope(kind, u) * v


def _entropy(z):
    # sum z log z with the 0 log 0 = 0 convention
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    mask = z > 0.0
    out[mask] = z[mask] * np.log(z[mask])
    return np.sum(out, axis=-1)


_DOMAIN_TOL = 1e-12


def _feasible(kind, z):
    z = np.asarray(z, dtype=float)
    if kind is ActivationKind.IDENTITY:
        return np.full(z.shape[:-1], True)
    if kind is ActivationKind.RELU:
        return np.all(z >= -_DOMAIN_TOL, axis=-1)
    if kind is ActivationKind.HARD_SIGMOID:
        return np.all((z >= -_DOMAIN_TOL) & (z <= 1.0 + _DOMAIN_TOL), axis=-1)
    if kind is ActivationKind.SOFTMAX:
        on_simplex = np.abs(np.sum(z, axis=-1) - 1.0) <= 1e-9
        return np.all(z >= -_DOMAIN_TOL, axis=-1) & on_simplex
    raise ValueError(f"unknown activation {kind}")


class ConjugatePair:
    """A convex function G and its conjugate G*, tied to an activation.

    The gradient of G* is exactly the forward activation, which is the
    Fenchel-Young equality case: G(z) + G*(u) = z.u iff z = grad G*(u).
    G carries the domain restriction that makes the stated conjugate true
    (nonnegativity for relu, the unit box for hard sigmoid, the probability
    simplex for softmax).
    """

    def __init__(self, kind):
        self.kind = kind

    def G(self, z):
        """Value of the convex part; +inf outside its domain."""
        z = np.asarray(z, dtype=float)
        feas = _feasible(self.kind, z)
        if self.kind is ActivationKind.SOFTMAX:
            val = _entropy(z)
        else:
            val = 0.5 * np.sum(z * z, axis=-1)
        return np.where(feas, val, np.inf) if val.ndim else (val if feas else np.inf)

    def G_star(self, u):
        """Convex conjugate sup_z (z.u - G(z)), in closed form."""
        u = np.asarray(u, dtype=float)
        if self.kind is ActivationKind.IDENTITY:
            return 0.5 * np.sum(u * u, axis=-1)
        if self.kind is ActivationKind.RELU:
            up = np.maximum(u, 0.0)
            return 0.5 * np.sum(up * up, axis=-1)
        if self.kind is ActivationKind.HARD_SIGMOID:
            # conjugate of z^2/2 on [0,1]: 0 below 0, u^2/2 inside, u - 1/2 above
            mid = np.clip(u, 0.0, 1.0)
            return np.sum(u * mid - 0.5 * mid * mid, axis=-1)
        if self.kind is ActivationKind.SOFTMAX:
            return logsumexp(u)
        raise ValueError(f"unknown activation {self.kind}")

    def grad_G_star(self, u):
        return activation_forward(self.kind, u)


def conjugate_pair(kind):
    return ConjugatePair(kind)


def conjugate_eval(pair, u):
    """G*(u) for a conjugate pair (function-call spelling of pair.G_star)."""
    return pair.G_star(u)


# ---------------------------------------------------------------------------
# layer energies
# ---------------------------------------------------------------------------

class LayerEnergy:
    """One layer's energy E(z, z_prev; W) in one of the three forms.

    ``weights`` has shape (out_dim, in_dim); with ``bias=True`` it has shape
    (out_dim, in_dim + 1) and the last column multiplies a constant 1
    appended to ``z_prev``.
    """

    def __init__(self, form, activation, weights, bias=False):
        if form is EnergyForm.PROXIMAL and activation is ActivationKind.SOFTMAX:
            raise ValueError("softmax has no proximal realisation; use the Fenchel form")
        self.form = form
        self.activation = activation
        self.weights = np.asarray(weights, dtype=float)
        self.bias = bias
        self.pair = conjugate_pair(activation)

    @property
    def out_dim(self):
        return self.weights.shape[0]

    @property
    def in_dim(self):
        return self.weights.shape[1] - (1 if self.bias else 0)

    def with_weights(self, weights):
        return LayerEnergy(self.form, self.activation, weights, bias=self.bias)

    def feedback_matrix(self):
        """The matrix that backpropagates signals (weights without the bias column)."""
        return self.weights[:, :-1] if self.bias else self.weights

    def augment(self, z_prev):
        z_prev = np.asarray(z_prev, dtype=float)
        if not self.bias:
            return z_prev
        ones = np.ones(z_prev.shape[:-1] + (1,))
        return np.concatenate([z_prev, ones], axis=-1)

    def pre_activation(self, z_prev):
        z_prev = np.asarray(z_prev, dtype=float)
        if z_prev.shape[-1] != self.in_dim:
            raise ValueError(
                f"lower activation has dim {z_prev.shape[-1]}, layer expects {self.in_dim}"
            )
        return self.augment(z_prev) @ self.weights.T


def forward_map(layer, z_prev):
    """Unique minimizer of E(., z_prev): the layer's forward activation."""
    return activation_forward(layer.activation, layer.pre_activation(z_prev))


def energy_eval(layer, z, z_prev):
    """E(z, z_prev); +inf marks points outside the energy's domain."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != layer.out_dim:
        raise ValueError(f"upper activation has dim {z.shape[-1]}, layer expects {layer.out_dim}")
    u = layer.pre_activation(z_prev)
    if layer.form is EnergyForm.PENALIZER:
        d = z - activation_forward(layer.activation, u)
        return 0.5 * np.sum(d * d, axis=-1)
    if layer.form is EnergyForm.FENCHEL:
        return layer.pair.G(z) - np.sum(z * u, axis=-1)
    # proximal: quadratic attachment plus the indicator inducing the activation
    d = z - u
    quad = 0.5 * np.sum(d * d, axis=-1)
    feas = _feasible(layer.activation, z)
    if quad.ndim:
        return np.where(feas, quad, np.inf)
    return quad if feas else np.inf


def _optimal_energy(layer, u):
    # min_z E(z, z_prev) expressed on the pre-activation u
    if layer.form is EnergyForm.PENALIZER:
        return np.zeros(u.shape[:-1])
    if layer.form is EnergyForm.FENCHEL:
        return -layer.pair.G_star(u)
    f = activation_forward(layer.activation, u)
    d = f - u
    return 0.5 * np.sum(d * d, axis=-1)


def tilde_energy(layer, z, z_prev):
    """Reduced energy E(z, z_prev) - min_z' E(z', z_prev); nonnegative.

    For the Fenchel form this is the Fenchel-Young gap
    G(z) - z.u + G*(u), evaluated in that expanded form to avoid
    cancellation.
    """
    z = np.asarray(z, dtype=float)
    u = layer.pre_activation(z_prev)
    if layer.form is EnergyForm.FENCHEL:
        return layer.pair.G(z) - np.sum(z * u, axis=-1) + layer.pair.G_star(u)
    return energy_eval(layer, z, z_prev) - _optimal_energy(layer, u)


def grad_tilde_wrt_lower(layer, z_upper, z_prev):
    """Partial derivative of the reduced energy in its lower argument.

    Fenchel and proximal forms share W^T (f(u) - z_upper); the penalizer
    form picks up the activation slope, W^T (f'(u) . (f(u) - z_upper)).
    """
    z_upper = np.asarray(z_upper, dtype=float)
    u = layer.pre_activation(z_prev)
    resid = activation_forward(layer.activation, u) - z_upper
    if layer.form is EnergyForm.PENALIZER:
        resid = activation_jacobian_vp(layer.activation, u, resid)
    return resid @ layer.feedback_matrix()


def energy_weight_grad(layer, z, z_prev):
    """Partial derivative of E in W at fixed activations (single sample)."""
    z = np.asarray(z, dtype=float)
    zp = layer.augment(z_prev)
    u = layer.pre_activation(z_prev)
    if layer.form is EnergyForm.FENCHEL:
        return -np.outer(z, zp)
    if layer.form is EnergyForm.PROXIMAL:
        return np.outer(u - z, zp)
    resid = activation_jacobian_vp(layer.activation, u, activation_forward(layer.activation, u) - z)
    return np.outer(resid, zp)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

class LossFamily(enum.Enum):
    SQUARED_ERROR = "squared"
    CROSS_ENTROPY = "crossentropy"


class SquaredError:
    """l(z) = 0.5 ||z - y||^2."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=float)

    def value(self, z):
        d = np.asarray(z, dtype=float) - self.target
        return 0.5 * np.sum(d * d, axis=-1)

    def grad(self, z):
        return np.asarray(z, dtype=float) - self.target


class CrossEntropyOnSoftmaxOutput:
    """l(z) = -sum_j y_j log z_j against a one-hot target, for softmax outputs."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=float)

    def value(self, z):
        z = np.asarray(z, dtype=float)
        if np.any((z <= 0.0) & (self.target > 0.0)):
            raise ValueError("cross entropy undefined: nonpositive output at an active target")
        safe = np.where(self.target > 0.0, z, 1.0)
        return -np.sum(self.target * np.log(safe), axis=-1)

    def grad(self, z):
        z = np.asarray(z, dtype=float)
        if np.any((z <= 0.0) & (self.target > 0.0)):
            raise ValueError("cross entropy undefined: nonpositive output at an active target")
        return -self.target / np.where(self.target > 0.0, z, 1.0)


class AbsoluteValue:
    """l(z) = sum |z_j|; used by the Moreau-envelope checks."""

    def value(self, z):
        return np.sum(np.abs(np.asarray(z, dtype=float)), axis=-1)

    def grad(self, z):
        return np.sign(np.asarray(z, dtype=float))


def make_loss(family, target):
    if family is LossFamily.SQUARED_ERROR:
        return SquaredError(target)
    if family is LossFamily.CROSS_ENTROPY:
        return CrossEntropyOnSoftmaxOutput(target)
    raise ValueError(f"unknown loss family {family}")


def loss_eval(loss, z):
    return loss.value(z)


def loss_grad(loss, z):
    return loss.grad(z)


# ---------------------------------------------------------------------------
# network specification
# ---------------------------------------------------------------------------

class NetworkSpec:
    """Layer dimensions, one energy per layer and the loss family.

    ``energies[k]`` couples activation k (dim ``layer_dims[k]``) to
    activation k+1 (dim ``layer_dims[k+1]``); activation 0 is the input.
    The output activation must be identity or softmax.
    """

    def __init__(self, layer_dims, energies, loss_family=LossFamily.SQUARED_ERROR):
        if len(energies) != len(layer_dims) - 1:
            raise ValueError(
                f"{len(layer_dims)} dims require {len(layer_dims) - 1} energies, "
                f"got {len(energies)}"
            )
        for k, e in enumerate(energies):
            if e.in_dim != layer_dims[k] or e.out_dim != layer_dims[k + 1]:
                raise ValueError(
                    f"energy {k} maps {e.in_dim}->{e.out_dim}, dims say "
                    f"{layer_dims[k]}->{layer_dims[k + 1]}"
                )
        top = energies[-1].activation
        if top not in (ActivationKind.IDENTITY, ActivationKind.SOFTMAX):
            raise ValueError("output layer must be identity or softmax")
        for e in energies[:-1]:
            if e.activation is ActivationKind.SOFTMAX:
                raise ValueError("softmax is only supported as the output activation")
        self.layer_dims = list(layer_dims)
        self.energies = list(energies)
        self.loss_family = loss_family

    @property
    def depth(self):
        return len(self.energies)

    def loss_for(self, target):
        return make_loss(self.loss_family, target)

    def copy(self):
        return NetworkSpec(
            self.layer_dims,
            [e.with_weights(e.weights.copy()) for e in self.energies],
            self.loss_family,
        )
