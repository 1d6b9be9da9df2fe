"""Dense array utilities: seeded RNG, weight initialisation, SGD and the
central-difference gradient oracle shared by every gradient test.

All functions are pure: arrays are never mutated in place, and randomness
only flows through an explicitly passed generator.
"""

import numpy as np

__all__ = [
    "make_rng",
    "glorot_uniform_init",
    "negative_init",
    "sgd_step",
    "finite_difference_gradient",
]


def make_rng(seed):
    """Create a counter-based generator (PCG64) owned by the caller.

    The same seed always yields the same stream, bit for bit.  No global
    state is touched anywhere in this package.
    """
    return np.random.Generator(np.random.PCG64(seed))


def glorot_uniform_init(rows, cols, rng):
    """Weight matrix with entries i.i.d. uniform on [-a, a], a = sqrt(6/(rows+cols))."""
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix dimensions must be >= 1, got {rows}x{cols}")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def negative_init(rows, cols, rng):
    """All-negative variant of the Glorot draw: entries uniform on [-a, 0).

    Implemented by negating the absolute value of a Glorot draw, so the
    consumed random stream matches :func:`glorot_uniform_init` entry for
    entry.
    """
    return -np.abs(glorot_uniform_init(rows, cols, rng))


def sgd_step(theta, grad, lr):
    """Plain gradient step ``theta - lr * grad`` (elementwise, new array)."""
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if theta.shape != grad.shape:
        raise ValueError(f"shape mismatch: theta {theta.shape} vs grad {grad.shape}")
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    return theta - lr * grad


def finite_difference_gradient(f, theta, h=1e-5):
    """Central-difference gradient of a scalar function of an array.

    Entry (i, j) is ``(f(theta + h e_ij) - f(theta - h e_ij)) / (2 h)``.
    Accuracy is O(h^2); the default h = 1e-5 resolves unit-scale problems
    to roughly 1e-10, enough to discriminate methods at spacing 1e-5.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    probe = np.array(theta, dtype=float, copy=True)
    grad = np.empty_like(probe)
    flat = probe.ravel()
    out = grad.ravel()
    for idx in range(flat.size):
        saved = flat[idx]
        flat[idx] = saved + h
        up = f(probe)
        flat[idx] = saved - h
        down = f(probe)
        flat[idx] = saved
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(
                f"non-finite objective value at probe {idx}: f+={up}, f-={down}"
            )
        out[idx] = (up - down) / (2.0 * h)
    return grad
