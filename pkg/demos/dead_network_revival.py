"""Waking a dead network with finite targets.

An all-negative weight initialization silences every ReLU unit: ordinary
back-propagation sees zero slopes everywhere and never moves.  Fenchel
back-propagation propagates finite targets instead of derivatives, and
with per-unit adaptive spacing those targets can jump out of the dead
zone - the network revives layer by layer.

Runs a scaled-down experiment (a few minutes on one core); the
full-size version lives in the acceptance suite and the CLI:

    illab train --method fenchel-bp --init negative --bias --adaptive-tau ...
"""

from illab import ActivationKind, MethodKind, SpacingSchedule, make_rng, run_training
from illab.cli import build_network
from illab.data import synthetic_digits
from illab.trainers import SpacingMode


def main():
    train = synthetic_digits(8_000, seed=2)
    test = synthetic_digits(2_000, seed=3)
    dims = [784, 64, 64, 64, 10]
    tau = SpacingSchedule.uniform(4, 0.1, SpacingMode.TAU)

    bp = build_network(dims, ActivationKind.RELU, MethodKind.BP, "negative", seed=1, bias=True)
    _, bp_metrics = run_training(bp, MethodKind.BP, SpacingSchedule.uniform(4, 1.0, SpacingMode.TAU),
                                 train, test, epochs=6, batch_size=64, lr=0.125, rng=make_rng(1))
    print("back-propagation from all-negative weights (stuck):")
    for m in bp_metrics:
        if m.split == "train":
            print(f"  epoch {m.epoch}: train error {100 * m.error_rate:5.1f}%")

    fen = build_network(dims, ActivationKind.RELU, MethodKind.FENCHEL_BP, "negative",
                        seed=1, bias=True)
    _, fen_metrics = run_training(fen, MethodKind.FENCHEL_BP, tau, train, test,
                                  epochs=10, batch_size=64, lr=0.125, rng=make_rng(1),
                                  adaptive=True)
    print("\nFenchel back-propagation with adaptive spacing (revives):")
    for m in fen_metrics:
        if m.split == "train":
            print(f"  epoch {m.epoch}: train error {100 * m.error_rate:5.1f}%")


if __name__ == "__main__":
    main()
