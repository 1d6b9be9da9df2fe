"""Single-level machinery for bilevel programs: loss-augmented minimizers,
contrastive and linearized surrogate values, the directional-derivative QP
for weakly active constraints, and the two reference parameter gradients
(implicit differentiation and the finite-spacing surrogate gradient).

The inner problem is a layer energy E(z; W) with a fixed input playing the
lower activation, so every shipped instance is strongly convex in z.  The
outer loss is duck-typed (``value``/``grad``); supplying a custom loss
object whose value/gradient realize some other first-order model of the
true loss is the extension point for general first-order surrogates beyond
the plain linearization.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .energies import (
    ActivationKind,
    EnergyForm,
    activation_forward,
    energy_eval,
    energy_weight_grad,
    forward_map,
    softmax,
)

__all__ = [
    "BilevelProblem",
    "QpInstance",
    "ActiveConstraintError",
    "ConvergenceError",
    "free_minimizer",
    "clamped_minimizer",
    "linearized_minimizer",
    "contrastive_surrogate_value",
    "linearized_surrogate_value",
    "directional_derivative_qp",
    "qp_kkt_residuals",
    "qp_instance_for_relu_problem",
    "relu_one_sided_derivative",
    "implicit_diff_gradient",
    "surrogate_parameter_gradient",
]


class ActiveConstraintError(RuntimeError):
    """Raised when implicit differentiation meets an active constraint."""


class ConvergenceError(RuntimeError):
    """Raised when an inner minimization exhausts its iteration budget."""


@dataclass
class BilevelProblem:
    """Outer loss over the minimizer of a layer energy with fixed input.

    ``theta`` is the energy's weight matrix; the input vector stands in for
    the lower activation.
    """

    energy: object
    x: np.ndarray
    loss: object

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)

    @property
    def theta(self):
        return self.energy.weights

    def pre(self):
        return self.energy.pre_activation(self.x)

    def energy_at(self, z):
        return energy_eval(self.energy, z, self.x)


def free_minimizer(problem):
    """z* = argmin_z E(z; theta); closed form via the forward map."""
    return forward_map(problem.energy, problem.x)


# ---------------------------------------------------------------------------
# loss-augmented (clamped) minimizer
# ---------------------------------------------------------------------------

_BOXES = {
    ActivationKind.IDENTITY: (-np.inf, np.inf),
    ActivationKind.RELU: (0.0, np.inf),
    ActivationKind.HARD_SIGMOID: (0.0, 1.0),
}


def _separable_clamped(problem, beta):
    """Exact per-coordinate minimizer for box-domain energies.

    For the Fenchel/proximal forms the objective per coordinate is
    beta*l_j(z) + z^2/2 - u_j z on a box; for the penalizer form it is
    beta*l_j(z) + (z - f(u)_j)^2/2 unconstrained.
    """
    u = problem.pre()
    loss = problem.loss
    if problem.energy.form is EnergyForm.PENALIZER:
        center, lo, hi = activation_forward(problem.energy.activation, u), -np.inf, np.inf
    else:
        center = u
        lo, hi = _BOXES[problem.energy.activation]
    name = type(loss).__name__
    if name == "SquaredError":
        z = (center + beta * loss.target) / (1.0 + beta)
    elif name == "AbsoluteValue":
        z = np.sign(center) * np.maximum(np.abs(center) - beta, 0.0)
    else:
        return None
    return np.clip(z, lo, hi)


def _softmax_clamped(problem, beta, tol, max_iter):
    """Clamped minimizer on the simplex via the softmax parametrization.

    Minimizes beta*l(s) + sum s log s - s.u with s = softmax(v); the
    reparametrized objective is smooth, and gradient descent with
    backtracking drives the (projected) gradient below tol.
    """
    u = problem.pre()
    loss = problem.loss

    def split(v):
        s = softmax(v)
        inner = np.sum(s * np.log(s), axis=-1) - s @ u
        return beta * loss.value(s) + inner, s

    def grad(v, s):
        w = beta * loss.grad(s) + np.log(s) + 1.0 - u
        return s * (w - np.sum(s * w))

    v = u.copy()
    val, s = split(v)
    step = 1.0
    for _ in range(max_iter):
        g = grad(v, s)
        if np.linalg.norm(g, ord=np.inf) <= tol:
            return s
        while True:
            cand = v - step * g
            cand_val, cand_s = split(cand)
            if cand_val <= val - 0.5 * step * (g @ g) or step < 1e-18:
                break
            step *= 0.5
        v, val, s = cand, cand_val, cand_s
        step = min(step * 2.0, 1e6)
    raise ConvergenceError(f"clamped minimizer: no convergence in {max_iter} iterations")


def clamped_minimizer(problem, beta, tol=1e-10, max_iter=10_000):
    """Loss-augmented minimizer argmin_z beta*l(z) + E(z; theta).

    Uses the exact per-coordinate solution wherever the energy decouples;
    falls back to an iterative solve on the softmax simplex, and to
    projected gradient for separable energies with unusual smooth losses.
    """
    if beta <= 0:
        raise ValueError(f"spacing parameter must be positive, got beta={beta}")
    if problem.energy.activation is ActivationKind.SOFTMAX:
        return _softmax_clamped(problem, beta, tol, max_iter)
    z = _separable_clamped(problem, beta)
    if z is not None:
        return z
    # generic smooth loss on a box domain: projected gradient, step 1/L
    u = problem.pre()
    loss = problem.loss
    penal = problem.energy.form is EnergyForm.PENALIZER
    center = activation_forward(problem.energy.activation, u) if penal else u
    lo, hi = (-np.inf, np.inf) if penal else _BOXES[problem.energy.activation]
    step = 1.0 / (1.0 + beta)
    z = np.clip(center, lo, hi)
    prev = np.inf
    for _ in range(max_iter):
        g = beta * loss.grad(z) + (z - center)
        z = np.clip(z - step * g, lo, hi)
        val = beta * loss.value(z) + 0.5 * np.sum((z - center) ** 2)
        if prev - val < tol:
            return z
        prev = val
    raise ConvergenceError(f"clamped minimizer: no convergence in {max_iter} iterations")


def linearized_minimizer(problem, tau):
    """Minimizer of the loss-linearized objective tau*z.l'(z*) + E(z; theta).

    Closed form for every shipped energy: the Fenchel/proximal forms tilt
    the pre-activation before the forward map, the penalizer form shifts
    the forward state itself.
    """
    if tau <= 0:
        raise ValueError(f"spacing parameter must be positive, got tau={tau}")
    z_star = free_minimizer(problem)
    g = problem.loss.grad(z_star)
    if problem.energy.form is EnergyForm.PENALIZER:
        return z_star - tau * g
    return activation_forward(problem.energy.activation, problem.pre() - tau * g)


def contrastive_surrogate_value(problem, beta):
    """l(z_hat) + (E(z_hat) - E(z*)) / beta at the clamped minimizer z_hat."""
    z_star = free_minimizer(problem)
    z_hat = clamped_minimizer(problem, beta)
    gap = problem.energy_at(z_hat) - problem.energy_at(z_star)
    return float(problem.loss.value(z_hat) + gap / beta)


def linearized_surrogate_value(problem, tau):
    """First-order surrogate: linearized loss at z*, energy gap at z_bar(tau)."""
    z_star = free_minimizer(problem)
    z_bar = linearized_minimizer(problem, tau)
    g = problem.loss.grad(z_star)
    gap = problem.energy_at(z_bar) - problem.energy_at(z_star)
    return float(problem.loss.value(z_star) + (z_bar - z_star) @ g + gap / tau)


# ---------------------------------------------------------------------------
# directional derivative of the clamped minimizer at beta -> 0+
# ---------------------------------------------------------------------------

@dataclass
class QpInstance:
    """Data of the directional-derivative QP at an active solution.

    ``A`` is the curvature (s.p.d.), ``B`` stacks the Jacobian rows of the
    active constraints, ``c`` is the outer loss gradient at z*, and
    ``weakly_active`` indexes the rows of B whose multipliers vanish.
    Rows not in ``weakly_active`` are strongly active and pin the
    direction to the constraint surface.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    weakly_active: tuple = ()

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.asarray(self.B, dtype=float).reshape(-1, self.A.shape[0])
        self.c = np.asarray(self.c, dtype=float)
        self.weakly_active = tuple(int(i) for i in self.weakly_active)


_QP_TOL = 1e-9
_QP_ENUM_LIMIT = 20


def _qp_is_decoupled(q):
    if q.A.shape[0] != q.A.shape[1] or not np.allclose(q.A, np.diag(np.diag(q.A))):
        return False
    return all(np.count_nonzero(row) == 1 for row in q.B)


def _solve_decoupled(q):
    diag = np.diag(q.A)
    zdot = -q.c / diag
    for i, row in enumerate(q.B):
        j = int(np.flatnonzero(row)[0])
        sign = row[j]
        if i in q.weakly_active:
            if sign * zdot[j] < 0.0:
                zdot[j] = 0.0
        else:
            zdot[j] = 0.0
    return zdot


def directional_derivative_qp(q):
    """Unique solution of the strictly convex directional-derivative QP.

    min 1/2 zdot^T A zdot + c^T zdot subject to B_i zdot = 0 on strongly
    active rows and B_i zdot >= 0 on weakly active rows.  Diagonal
    instances with axis-aligned rows are solved coordinate-wise; general
    small instances by enumerating active subsets of the weakly active
    rows.
    """
    eigvals = np.linalg.eigvalsh((q.A + q.A.T) / 2.0)
    if eigvals.min() <= 0:
        raise ValueError(f"QP curvature must be positive definite, min eig {eigvals.min():g}")
    if _qp_is_decoupled(q):
        return _solve_decoupled(q)
    weak = list(q.weakly_active)
    if len(weak) > _QP_ENUM_LIMIT:
        raise ValueError(f"active-set enumeration limited to {_QP_ENUM_LIMIT} weak rows")
    strong = [i for i in range(q.B.shape[0]) if i not in q.weakly_active]
    n = q.A.shape[0]
    for size in range(len(weak) + 1):
        for subset in itertools.combinations(weak, size):
            rows = strong + list(subset)
            Be = q.B[rows] if rows else np.zeros((0, n))
            m = Be.shape[0]
            kkt = np.block([[q.A, -Be.T], [Be, np.zeros((m, m))]])
            rhs = np.concatenate([-q.c, np.zeros(m)])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            zdot, lam = sol[:n], sol[n:]
            lam_weak = lam[len(strong):]
            if np.any(lam_weak < -_QP_TOL):
                continue
            inactive = [i for i in weak if i not in subset]
            if inactive and np.any(q.B[inactive] @ zdot < -_QP_TOL):
                continue
            return zdot
    raise RuntimeError("active-set enumeration found no KKT point")


def qp_kkt_residuals(q, zdot):
    """KKT residuals of a candidate direction: stationarity, feasibility,
    complementarity and dual feasibility, for the invariant checks."""
    active = [
        i for i in range(q.B.shape[0])
        if i not in q.weakly_active or abs(q.B[i] @ zdot) <= _QP_TOL
    ]
    Ba = q.B[active] if active else np.zeros((0, q.A.shape[0]))
    lam = np.linalg.lstsq(Ba.T, q.A @ zdot + q.c, rcond=None)[0] if active else np.zeros(0)
    pos = {i: k for k, i in enumerate(active)}
    weak_in_active = [i for i in active if i in q.weakly_active]
    res = {
        "stationarity": float(np.linalg.norm(q.A @ zdot + q.c - Ba.T @ lam, ord=np.inf)),
        "feasibility": float(max(0.0, -(q.B @ zdot).min(initial=0.0))),
        "complementarity": float(
            max((abs((q.B[i] @ zdot) * lam[pos[i]]) for i in weak_in_active), default=0.0)
        ),
        "dual": float(max((max(0.0, -lam[pos[i]]) for i in weak_in_active), default=0.0)),
    }
    # strongly active rows must hold with equality
    strong = [i for i in range(q.B.shape[0]) if i not in q.weakly_active]
    if strong:
        res["feasibility"] = max(res["feasibility"], float(np.max(np.abs(q.B[strong] @ zdot))))
    return res


def qp_instance_for_relu_problem(problem):
    """Build the Prop-style QP data for a nonnegativity-constrained quadratic
    energy at its free minimizer (the decoupled ReLU setting)."""
    if problem.energy.activation is not ActivationKind.RELU:
        raise ValueError("instance builder covers the ReLU energy only")
    u = problem.pre()
    z_star = np.maximum(u, 0.0)
    n = u.shape[-1]
    active = np.flatnonzero(z_star <= 0.0)
    B = np.eye(n)[active]
    # multiplier of constraint j at z*: -u_j when u_j < 0, zero at the kink
    weak = tuple(k for k, j in enumerate(active) if u[j] >= -1e-12)
    return QpInstance(A=np.eye(n), B=B, c=problem.loss.grad(z_star), weakly_active=weak)


def relu_one_sided_derivative(pre_activation, loss_gradient):
    """One-sided limit of (z_bar(tau) - z*) / tau for the ReLU energy.

    Coordinate-wise: -g on strictly positive pre-activations, max(0, -g)
    at the kink, 0 on dead units.  Always defined, unlike the strong
    derivative used by back-propagation.
    """
    u = np.asarray(pre_activation, dtype=float)
    g = np.asarray(loss_gradient, dtype=float)
    out = np.where(u > 0.0, -g, 0.0)
    kink = u == 0.0
    out[kink] = np.maximum(-g[kink], 0.0)
    return out


# ---------------------------------------------------------------------------
# reference parameter gradients
# ---------------------------------------------------------------------------

_KINK_TOL = 1e-12


def implicit_diff_gradient(problem):
    """Exact hypergradient via implicit differentiation of the smooth path.

    Valid only when no constraint is active and the pre-activation avoids
    every activation kink; otherwise raises and the caller must go through
    the directional-derivative QP.
    """
    u = problem.pre()
    act = problem.energy.activation
    if act is ActivationKind.SOFTMAX:
        raise ActiveConstraintError("softmax couples coordinates on the simplex; no smooth path")
    if act is ActivationKind.RELU:
        bad = u <= _KINK_TOL if problem.energy.form is not EnergyForm.PENALIZER else np.abs(u) <= _KINK_TOL
        if np.any(bad):
            raise ActiveConstraintError(f"active constraint or kink at coords {np.flatnonzero(bad)}")
    if act is ActivationKind.HARD_SIGMOID:
        interior = (u > _KINK_TOL) & (u < 1.0 - _KINK_TOL)
        if problem.energy.form is EnergyForm.PENALIZER:
            interior |= (u < -_KINK_TOL) | (u > 1.0 + _KINK_TOL)
        if not np.all(interior):
            raise ActiveConstraintError(
                f"active constraint or kink at coords {np.flatnonzero(~interior)}"
            )
    # every shipped energy has unit curvature in z at a smooth point, so the
    # hypergradient collapses to the slope-weighted outer product
    z_star = free_minimizer(problem)
    g = problem.loss.grad(z_star)
    if problem.energy.form is EnergyForm.PENALIZER:
        slope = {
            ActivationKind.IDENTITY: np.ones_like(u),
            ActivationKind.RELU: (u > 0).astype(float),
            ActivationKind.HARD_SIGMOID: ((u > 0) & (u < 1)).astype(float),
        }[act]
        g = slope * g
    return np.outer(g, problem.energy.augment(problem.x))


def surrogate_parameter_gradient(problem, beta):
    """Finite-spacing gradient (1/beta)(dE/dW at z_hat - dE/dW at z*)."""
    z_star = free_minimizer(problem)
    z_hat = clamped_minimizer(problem, beta)
    g_hat = energy_weight_grad(problem.energy, z_hat, problem.x)
    g_star = energy_weight_grad(problem.energy, z_star, problem.x)
    return (g_hat - g_star) / beta
