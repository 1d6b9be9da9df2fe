"""All roads lead to back-propagation.

One random feed-forward network, four training methods, one reference:
central finite differences of the nested objective.  As the spacing
parameters shrink, the Fenchel, global-contrastive and lifted gradients
all collapse onto the ordinary gradient.
"""

import numpy as np

from illab import (
    ActivationKind,
    MethodKind,
    SpacingMode,
    SpacingSchedule,
    deep_loss,
    finite_difference_gradient,
    method_weight_gradients,
)
from illab.testing import random_smooth_instance


def fd_reference(net, x, y):
    grads = []
    for j in range(net.depth):
        def f(w, j=j):
            probe = net.copy()
            probe.energies[j] = probe.energies[j].with_weights(w)
            return deep_loss(probe, x, y)

        grads.append(finite_difference_gradient(f, net.energies[j].weights, h=1e-6))
    return grads


def rel_gap(grads, ref):
    worst = 0.0
    for g, r in zip(grads, ref):
        worst = max(worst, np.max(np.abs(g - r)) / max(np.max(np.abs(r)), 1e-12))
    return worst


def main():
    dims = [6, 10, 8, 4]
    bp_net, x, y = random_smooth_instance(dims, ActivationKind.RELU, MethodKind.BP, seed=0)
    fen_net, _, _ = random_smooth_instance(dims, ActivationKind.RELU, MethodKind.FENCHEL_BP, seed=0)
    ref = fd_reference(bp_net, x, y)

    bp = method_weight_gradients(bp_net, x, y, MethodKind.BP,
                                 SpacingSchedule.uniform(3, 1.0, SpacingMode.TAU))
    print(f"back-propagation vs finite differences: {rel_gap(bp, ref):.2e}")

    print("\nspacing sweep (relative gap to the exact gradient):")
    print(f"{'spacing':>10} {'fenchel-bp':>12} {'gcl':>12} {'lpom':>12}")
    for spacing in (1e-1, 1e-2, 1e-3, 1e-4):
        row = []
        for method, mode in ((MethodKind.FENCHEL_BP, SpacingMode.TAU),
                             (MethodKind.GCL, SpacingMode.BETA),
                             (MethodKind.LPOM, SpacingMode.BETA)):
            sched = SpacingSchedule.uniform(3, spacing, mode)
            row.append(rel_gap(method_weight_gradients(fen_net, x, y, method, sched), ref))
        print(f"{spacing:>10g} {row[0]:>12.2e} {row[1]:>12.2e} {row[2]:>12.2e}")


if __name__ == "__main__":
    main()
