"""Dataset ingestion (MNIST IDX files, seeded synthetic fallbacks),
batched epoch loops, metric records and CSV persistence."""

import csv
import gzip
import struct
import time
from dataclasses import dataclass

import numpy as np

from .energies import make_loss
from .numeric import make_rng
from .trainers import forward_pass, train_step

__all__ = [
    "Dataset",
    "Metrics",
    "load_mnist_idx",
    "one_hot",
    "two_moons",
    "synthetic_digits",
    "run_training",
    "evaluate",
    "write_metrics_csv",
    "read_metrics_csv",
]

IMAGE_MAGIC = 2051  # 0x00000803: unsigned bytes, 3 dims
LABEL_MAGIC = 2049  # 0x00000801: unsigned bytes, 1 dim


@dataclass
class Dataset:
    """Flattened inputs in [0,1] with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels"
            )

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0


@dataclass
class Metrics:
    epoch: int
    split: str
    error_rate: float
    mean_loss: float
    wall_ms: float


def _open_maybe_gzip(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_be32(f, what):
    raw = f.read(4)
    if len(raw) != 4:
        raise ValueError(f"truncated IDX file while reading {what}")
    return struct.unpack(">i", raw)[0]


def load_mnist_idx(images_path, labels_path):
    """Load an IDX image/label pair into a Dataset.

    Big-endian headers, magic 2051/2049; pixel bytes are scaled by 1/255
    and images flattened row-major.  Gzip-compressed files are accepted
    when the name ends in .gz.
    """
    with _open_maybe_gzip(images_path) as f:
        magic = _read_be32(f, "image magic")
        if magic != IMAGE_MAGIC:
            raise ValueError(f"bad image magic {magic}, expected {IMAGE_MAGIC}")
        count = _read_be32(f, "image count")
        rows = _read_be32(f, "row count")
        cols = _read_be32(f, "column count")
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise ValueError(
                f"truncated image data: expected {count * rows * cols} bytes, got {len(raw)}"
            )
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with _open_maybe_gzip(labels_path) as f:
        magic = _read_be32(f, "label magic")
        if magic != LABEL_MAGIC:
            raise ValueError(f"bad label magic {magic}, expected {LABEL_MAGIC}")
        n_labels = _read_be32(f, "label count")
        raw = f.read(n_labels)
        if len(raw) != n_labels:
            raise ValueError(f"truncated label data: expected {n_labels} bytes, got {len(raw)}")
        labels = np.frombuffer(raw, dtype=np.uint8)
    if count != n_labels:
        raise ValueError(f"image/label count mismatch: {count} vs {n_labels}")
    return Dataset(images.astype(float) / 255.0, labels.astype(np.int64), name="mnist")


def one_hot(label, n_classes):
    """Standard basis vector for a class index."""
    label = int(label)
    if not 0 <= label < n_classes:
        raise ValueError(f"label {label} outside 0..{n_classes - 1}")
    v = np.zeros(n_classes)
    v[label] = 1.0
    return v


def _one_hot_batch(labels, n_classes):
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def two_moons(n, seed, noise=0.1):
    """Seeded two-interleaved-half-circles dataset, rescaled into [0,1]^2."""
    rng = make_rng(seed)
    half = n // 2
    t = rng.uniform(0.0, np.pi, size=half)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    t2 = rng.uniform(0.0, np.pi, size=n - half)
    lower = np.stack([1.0 - np.cos(t2), 0.5 - np.sin(t2)], axis=1)
    pts = np.concatenate([upper, lower]) + noise * rng.standard_normal((n, 2))
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(n - half, dtype=np.int64)])
    order = rng.permutation(n)
    pts, labels = pts[order], labels[order]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return Dataset((pts - lo) / (hi - lo), labels, name="two-moons")


def synthetic_digits(n, seed, dim=784, n_classes=10, prototype_seed=1234):
    """Seeded MNIST-shaped stand-in: sparse bright class strokes on a dark
    background, matching the real thing's pixel statistics (mostly zeros,
    mean intensity near 0.13).

    Prototypes depend only on ``prototype_seed``, so train and test splits
    drawn with different ``seed`` values share the same classes.  Used
    whenever the real IDX files are not on disk so the desk-scale
    experiments stay runnable.
    """
    proto_rng = make_rng(prototype_seed)
    protos = proto_rng.uniform(0.0, 1.0, size=(n_classes, dim))
    # smooth so neighbouring coordinates correlate, then keep only the
    # brightest fifth as the class stroke
    for _ in range(3):
        protos = 0.5 * protos + 0.25 * (np.roll(protos, 1, axis=1) + np.roll(protos, -1, axis=1))
    thresh = np.quantile(protos, 0.8, axis=1, keepdims=True)
    peak = protos.max(axis=1, keepdims=True)
    protos = np.clip((protos - thresh) / (peak - thresh), 0.0, 1.0)
    rng = make_rng(seed)
    labels = rng.integers(0, n_classes, size=n)
    brightness = rng.uniform(0.5, 1.0, size=(n, 1))
    keep = rng.uniform(0.0, 1.0, size=(n, dim)) >= 0.3  # per-sample stroke dropout
    speckle = rng.uniform(0.0, 1.0, size=(n, dim)) * (rng.uniform(0.0, 1.0, size=(n, dim)) < 0.08)
    x = protos[labels] * brightness * keep + 0.3 * speckle
    return Dataset(np.clip(x, 0.0, 1.0), labels.astype(np.int64), name="synthetic-digits")


def evaluate(net, dataset, batch_size=256):
    """Mean loss and argmax error rate over a dataset."""
    n = len(dataset)
    n_classes = net.layer_dims[-1]
    errors = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        xb = dataset.inputs[start:start + batch_size]
        lb = dataset.labels[start:start + batch_size]
        out = forward_pass(net, xb).output
        pred = np.argmax(out, axis=-1)
        errors += int(np.sum(pred != lb))
        yb = _one_hot_batch(lb, n_classes)
        loss_sum += float(np.sum(make_loss(net.loss_family, yb).value(out)))
    return loss_sum / n, errors / n


def run_training(net, method, sched, train, test, *, epochs, batch_size, lr,
                 rng, adaptive=False, eval_batch=256):
    """Seeded epoch loop: shuffle, step over mini-batches, evaluate splits.

    Returns the trained network and one Metrics row per (epoch, split).
    Aborts with a diagnostic if the batch loss goes non-finite.
    """
    if epochs < 0 or batch_size < 1 or lr <= 0:
        raise ValueError("epochs must be >= 0, batch_size >= 1 and lr > 0")
    n_classes = net.layer_dims[-1]
    metrics = []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        xs = train.inputs[order]
        ys = _one_hot_batch(train.labels[order], n_classes)
        for start in range(0, len(train), batch_size):
            xb = xs[start:start + batch_size]
            yb = ys[start:start + batch_size]
            net, batch_loss = train_step(net, xb, yb, method, sched, lr, adaptive=adaptive)
            if not np.isfinite(batch_loss):
                raise FloatingPointError(
                    f"non-finite loss {batch_loss} at epoch {epoch}, batch {start // batch_size}"
                )
        wall_ms = (time.perf_counter() - t0) * 1000.0
        for split, ds in (("train", train), ("test", test)):
            mean_loss, err = evaluate(net, ds, batch_size=eval_batch)
            metrics.append(Metrics(epoch, split, err, mean_loss, wall_ms))
    return net, metrics


CSV_HEADER = ["epoch", "split", "error_rate", "mean_loss", "wall_ms"]


def write_metrics_csv(metrics, path):
    """One row per record; error_rate with 6 decimals, LF endings, UTF-8."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for m in metrics:
            writer.writerow([
                m.epoch, m.split, f"{m.error_rate:.6f}", repr(float(m.mean_loss)),
                f"{m.wall_ms:.3f}",
            ])


def read_metrics_csv(path):
    with open(path, encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        return [
            Metrics(int(r[0]), r[1], float(r[2]), float(r[3]), float(r[4]))
            for r in reader
        ]
