"""Command-line entry point: training runs, gradient checks against the
finite-difference oracle, and spacing-parameter sweeps.

Exit codes: 0 success, 1 numeric abort or tolerance violation, 2 config
error, 3 data error.
"""

import argparse
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import (
    load_mnist_idx,
    read_metrics_csv,
    run_training,
    synthetic_digits,
    write_metrics_csv,
)
from .energies import (
    ActivationKind,
    EnergyForm,
    LayerEnergy,
    LossFamily,
    NetworkSpec,
)
from .numeric import finite_difference_gradient, glorot_uniform_init, make_rng, negative_init
from .trainers import (
    MethodKind,
    SpacingMode,
    SpacingSchedule,
    deep_loss,
    method_weight_gradients,
)

__all__ = ["TrainConfig", "build_network", "cmd_train", "cmd_gradcheck", "cmd_sweep", "main"]

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_CONFIG = 2
EXIT_DATA = 3

_METHOD_NAMES = {
    "bp": MethodKind.BP,
    "fenchel-bp": MethodKind.FENCHEL_BP,
    "gcl": MethodKind.GCL,
    "mac": MethodKind.MAC_LCL,
    "lpom": MethodKind.LPOM,
}

_ACTIVATIONS = {"relu": ActivationKind.RELU, "hardsigmoid": ActivationKind.HARD_SIGMOID}

_METHOD_MODE = {
    MethodKind.BP: SpacingMode.TAU,
    MethodKind.FENCHEL_BP: SpacingMode.TAU,
    MethodKind.GCL: SpacingMode.BETA,
    MethodKind.MAC_LCL: SpacingMode.BETA,
    MethodKind.LPOM: SpacingMode.BETA,
}

_METHOD_FORM = {
    MethodKind.BP: EnergyForm.PENALIZER,
    MethodKind.MAC_LCL: EnergyForm.PENALIZER,
    MethodKind.FENCHEL_BP: EnergyForm.FENCHEL,
    MethodKind.GCL: EnergyForm.FENCHEL,
    MethodKind.LPOM: EnergyForm.FENCHEL,
}


@dataclass
class TrainConfig:
    method: str = "bp"
    arch: str = "784-64-64-64-10"
    activation: str = "relu"
    lr: float = 0.125
    batch: int = 64
    epochs: int = 20
    seed: int = 1
    init: str = "glorot"
    spacing: object = 0.1  # scalar or per-layer list (tau or beta by method)
    adaptive_tau: bool = False
    bias: bool = False
    data_dir: str = None
    data: str = "auto"  # auto | mnist | synthetic
    out: str = "metrics.csv"
    plot: bool = False
    train_size: int = 60_000
    test_size: int = 10_000


def parse_arch(text):
    try:
        dims = [int(p) for p in str(text).split("-")]
    except ValueError:
        raise ValueError(f"architecture {text!r} is not dash-separated integers")
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"architecture needs >= 2 positive dims, got {text!r}")
    return dims


def build_network(dims, activation, method, init, seed, bias=False,
                  loss_family=LossFamily.SQUARED_ERROR):
    """Network with the method's energy form, hidden activation everywhere
    but an identity (or softmax) output layer."""
    rng = make_rng(seed)
    form = _METHOD_FORM[method]
    init_fn = {"glorot": glorot_uniform_init, "negative": negative_init}[init]
    out_act = (
        ActivationKind.SOFTMAX
        if loss_family is LossFamily.CROSS_ENTROPY
        else ActivationKind.IDENTITY
    )
    energies = []
    for j in range(len(dims) - 1):
        cols = dims[j] + (1 if bias else 0)
        w = init_fn(dims[j + 1], cols, rng)
        act = activation if j < len(dims) - 2 else out_act
        energies.append(LayerEnergy(form, act, w, bias=bias))
    return NetworkSpec(dims, energies, loss_family)


def make_schedule(spacing, depth, method):
    mode = _METHOD_MODE[method]
    if np.isscalar(spacing):
        values = np.full(depth, float(spacing))
    else:
        values = np.asarray([float(v) for v in spacing])
        if values.size != depth:
            raise ValueError(f"{values.size} spacing values for {depth} layers")
    if np.any(values <= 0):
        raise ValueError("spacing parameters must be positive")
    return SpacingSchedule(values, mode)


def _resolve_data(config, dims):
    data_dir = config.data_dir or os.environ.get("IL_LAB_DATA_DIR")
    want = config.data
    if want in ("auto", "mnist") and data_dir:
        pairs = []
        for img, lab in (("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                         ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")):
            found = None
            for suffix in ("", ".gz"):
                ip = Path(data_dir) / (img + suffix)
                lp = Path(data_dir) / (lab + suffix)
                if ip.exists() and lp.exists():
                    found = (ip, lp)
                    break
            if found is None:
                if want == "mnist":
                    raise FileNotFoundError(f"missing {img}[.gz] under {data_dir}")
                pairs = None
                break
            pairs.append(found)
        if pairs:
            train = load_mnist_idx(*pairs[0])
            test = load_mnist_idx(*pairs[1])
            return train, test
    if want == "mnist":
        raise FileNotFoundError("--data mnist requires --data-dir or IL_LAB_DATA_DIR")
    train = synthetic_digits(config.train_size, seed=2, dim=dims[0], n_classes=dims[-1])
    test = synthetic_digits(config.test_size, seed=3, dim=dims[0], n_classes=dims[-1])
    return train, test


def cmd_train(config):
    """Run one training configuration, write the metrics CSV (and SVG)."""
    try:
        dims = parse_arch(config.arch)
        method = _METHOD_NAMES[config.method]
        activation = _ACTIVATIONS[config.activation]
        sched = make_schedule(config.spacing, len(dims) - 1, method)
        if config.lr <= 0 or config.batch < 1 or config.epochs < 0:
            raise ValueError("lr must be > 0, batch >= 1, epochs >= 0")
    except (KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        train, test = _resolve_data(config, dims)
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    net = build_network(dims, activation, method, config.init, config.seed, bias=config.bias)
    rng = make_rng(config.seed)
    try:
        _, metrics = run_training(
            net, method, sched, train, test,
            epochs=config.epochs, batch_size=config.batch, lr=config.lr,
            rng=rng, adaptive=config.adaptive_tau,
        )
    except FloatingPointError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_metrics_csv(metrics, config.out)
    print(f"wrote {config.out} ({len(metrics)} rows)")
    if config.plot:
        svg_path = str(Path(config.out).with_suffix(".svg"))
        write_error_svg(svg_path, {config.method: metrics})
        print(f"wrote {svg_path}")
    return EXIT_OK


def cmd_gradcheck(method_name, seed=0, dims=(6, 5, 4), spacing=1e-5, tol=1e-3,
                  activation="relu", quiet=False):
    """Compare a method's gradient against central differences of the
    nested objective (and report the gap to back-propagation)."""
    try:
        method = _METHOD_NAMES[method_name]
        act = _ACTIVATIONS[activation]
        dims = list(dims)
        if any(d > 32 for d in dims):
            raise ValueError("gradcheck dims are capped at 32 per layer")
        if (np.isscalar(spacing) and spacing <= 0) or tol <= 0:
            raise ValueError("spacing and tol must be positive")
    except (KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from .testing import random_smooth_instance  # deferred: shared with the test-suite

    # inflated targets make the finite-spacing bias visible at large tau
    net, x, y = random_smooth_instance(dims, act, method, seed, target_scale=-4.0)
    sched = make_schedule(spacing, len(dims) - 1, method)
    grads = method_weight_gradients(net, x, y, method, sched)
    bp_net, _, _ = random_smooth_instance(dims, act, MethodKind.BP, seed, target_scale=-4.0)
    bp_sched = make_schedule(1.0, len(dims) - 1, MethodKind.BP)
    bp_grads = method_weight_gradients(bp_net, x, y, MethodKind.BP, bp_sched)

    worst_fd = 0.0
    worst_bp = 0.0
    for j in range(len(net.energies)):
        def f(w, j=j):
            probe = net.copy()
            probe.energies[j] = probe.energies[j].with_weights(w)
            return deep_loss(probe, x, y)

        fd = finite_difference_gradient(f, net.energies[j].weights, h=1e-6)
        scale = max(float(np.max(np.abs(fd))), 1e-12)
        worst_fd = max(worst_fd, float(np.max(np.abs(grads[j] - fd))) / scale)
        worst_bp = max(worst_bp, float(np.max(np.abs(grads[j] - bp_grads[j]))) / scale)
    if not quiet:
        print(f"max relative error vs finite differences: {worst_fd:.3e}")
        print(f"max relative error vs back-propagation:   {worst_bp:.3e}")
        print(f"tolerance: {tol:.1e} -> {'OK' if worst_fd <= tol else 'FAIL'}")
    return EXIT_OK if worst_fd <= tol else EXIT_NUMERIC


def cmd_sweep(config, values):
    """One training run per spacing value; suffixed CSVs plus a combined SVG."""
    if not values:
        print("config error: empty sweep list", file=sys.stderr)
        return EXIT_CONFIG
    if any(v <= 0 for v in values):
        print("config error: spacing values must be positive", file=sys.stderr)
        return EXIT_CONFIG
    base = Path(config.out)
    all_metrics = {}
    for v in values:
        run_cfg = replace(config, spacing=v,
                          out=str(base.with_name(f"{base.stem}_{v:g}{base.suffix}")))
        code = cmd_train(run_cfg)
        if code != EXIT_OK:
            return code
        all_metrics[f"{config.method} {v:g}"] = read_metrics_csv(run_cfg.out)
    svg_path = str(base.with_suffix(".svg"))
    write_error_svg(svg_path, all_metrics)
    print(f"wrote {svg_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# dependency-free SVG line plots (solid = train error, dashed = test error)
# ---------------------------------------------------------------------------

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def write_error_svg(path, runs, width=640, height=400):
    margin = 50
    series = []
    for i, (label, metrics) in enumerate(runs.items()):
        for split, dashed in (("train", False), ("test", True)):
            pts = [(m.epoch, 100.0 * m.error_rate) for m in metrics if m.split == split]
            if pts:
                series.append((f"{label} {split}", pts, _PALETTE[i % len(_PALETTE)], dashed))
    if not series:
        raise ValueError("nothing to plot")
    xs = [p[0] for _, pts, _, _ in series for p in pts]
    ys = [p[1] for _, pts, _, _ in series for p in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = 0.0, max(max(ys), 1e-6)
    if x_hi == x_lo:
        x_hi = x_lo + 1

    def sx(x):
        return margin + (x - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 10}" text-anchor="middle" '
        f'font-size="12">epoch</text>',
        f'<text x="14" y="{height / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.0f})">error (%)</text>',
    ]
    for tick in np.linspace(y_lo, y_hi, 5):
        parts.append(
            f'<text x="{margin - 6}" y="{sy(tick):.1f}" text-anchor="end" '
            f'font-size="10">{tick:.1f}</text>'
        )
    for k, (label, pts, color, dashed) in enumerate(series):
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        dash = ' stroke-dasharray="6,4"' if dashed else ""
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>'
        )
        parts.append(
            f'<text x="{width - margin + 4}" y="{margin + 14 * k}" font-size="10" '
            f'fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts), encoding="utf-8")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _parse_spacing(text):
    parts = str(text).split(",")
    vals = [float(p) for p in parts]
    return vals[0] if len(vals) == 1 else vals


def _add_train_flags(p):
    p.add_argument("--method", default="bp", choices=sorted(_METHOD_NAMES))
    p.add_argument("--arch", default="784-64-64-64-10")
    p.add_argument("--activation", default="relu", choices=sorted(_ACTIVATIONS))
    p.add_argument("--lr", type=float, default=0.125)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--init", default="glorot", choices=["glorot", "negative"])
    p.add_argument("--tau", default=None, help="spacing (scalar or comma list)")
    p.add_argument("--beta", default=None, help="spacing (scalar or comma list)")
    p.add_argument("--adaptive-tau", action="store_true")
    p.add_argument("--bias", action="store_true", help="append a constant-1 input coordinate")
    p.add_argument("--data-dir", default=None)
    p.add_argument("--data", default="auto", choices=["auto", "mnist", "synthetic"])
    p.add_argument("--out", default="metrics.csv")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--train-size", type=int, default=60_000)
    p.add_argument("--test-size", type=int, default=10_000)


def _config_from_args(args):
    spacing = args.tau if args.tau is not None else args.beta
    if spacing is None:
        spacing = 0.1
    else:
        spacing = _parse_spacing(spacing)
    return TrainConfig(
        method=args.method, arch=args.arch, activation=args.activation,
        lr=args.lr, batch=args.batch, epochs=args.epochs, seed=args.seed,
        init=args.init, spacing=spacing, adaptive_tau=args.adaptive_tau,
        bias=args.bias, data_dir=args.data_dir, data=args.data, out=args.out,
        plot=args.plot, train_size=args.train_size, test_size=args.test_size,
    )


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="illab",
        description="Train and cross-validate contrastive-surrogate learning methods",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training configuration")
    _add_train_flags(p_train)

    p_check = sub.add_parser("gradcheck", help="compare a method's gradient to the oracle")
    p_check.add_argument("--method", default="fenchel-bp", choices=sorted(_METHOD_NAMES))
    p_check.add_argument("--seed", type=int, default=0)
    p_check.add_argument("--dims", default="6-5-4")
    p_check.add_argument("--activation", default="relu", choices=sorted(_ACTIVATIONS))
    p_check.add_argument("--tau", default=None)
    p_check.add_argument("--beta", default=None)
    p_check.add_argument("--tol", type=float, default=1e-3)

    p_sweep = sub.add_parser("sweep", help="one run per spacing value")
    _add_train_flags(p_sweep)
    p_sweep.add_argument("--tau-list", default=None)
    p_sweep.add_argument("--beta-list", default=None)

    args = parser.parse_args(argv)
    if args.command == "train":
        try:
            config = _config_from_args(args)
        except ValueError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return cmd_train(config)
    if args.command == "gradcheck":
        spacing = args.tau if args.tau is not None else args.beta
        try:
            dims = parse_arch(args.dims)
            spacing = float(spacing) if spacing is not None else 1e-5
        except ValueError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return cmd_gradcheck(args.method, seed=args.seed, dims=dims, spacing=spacing,
                             tol=args.tol, activation=args.activation)
    if args.command == "sweep":
        raw = args.tau_list if args.tau_list is not None else args.beta_list
        if raw is None or not str(raw).strip():
            print("config error: sweep needs --tau-list or --beta-list", file=sys.stderr)
            return EXIT_CONFIG
        try:
            values = [float(v) for v in str(raw).split(",") if v.strip()]
            config = _config_from_args(args)
        except ValueError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return cmd_sweep(config, values)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
