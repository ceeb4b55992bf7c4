"""Dataset ingestion: IDX image/label files (big-endian MNIST layout,
normalized to zero mean and unit variance) and deterministic synthetic
teacher-student sets for desk-scale training runs."""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, ...) float64
    targets: np.ndarray  # (n, out) float for regression, (n,) int for classification
    kind: str  # "regression" | "classification"


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise DatasetError(f"{what} is truncated")
    return data


def load_idx_dataset(images_path, labels_path):
    """MNIST-style IDX pair -> classification dataset with inputs normalized
    by subtracting the mean and dividing by the standard deviation."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">iiii", _read_exact(f, 16, "image header"))
        if magic != IMAGES_MAGIC:
            raise DatasetError(f"image magic mismatch: got {magic:#010x}")
        raw = _read_exact(f, count * rows * cols, "image data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    with open(labels_path, "rb") as f:
        magic, n_labels = struct.unpack(">ii", _read_exact(f, 8, "label header"))
        if magic != LABELS_MAGIC:
            raise DatasetError(f"label magic mismatch: got {magic:#010x}")
        labels = np.frombuffer(_read_exact(f, n_labels, "label data"), dtype=np.uint8)
    if n_labels != count:
        raise DatasetError(f"count mismatch: {count} images vs {n_labels} labels")
    x = images.astype(np.float64)
    std = x.std()
    if std == 0:
        raise DatasetError("image data has zero variance")
    x = (x - x.mean()) / std
    return Dataset(inputs=x, targets=labels.astype(np.int64), kind="classification")


def synth_dataset(kind, n, dims, seed, out_dim=None):
    """Deterministic synthetic data from a fixed random two-layer ReLU
    teacher: regression targets are the teacher's outputs, classification
    targets its argmax."""
    if kind not in ("regression", "classification"):
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")
    if n < 1 or dims < 1:
        raise ValueError("n and dims must be positive")
    if out_dim is None:
        out_dim = 1 if kind == "regression" else 10
    rng = np.random.default_rng(seed)
    hidden = 16
    w1 = rng.standard_normal((dims, hidden)) * np.sqrt(2.0 / dims)
    w2 = rng.standard_normal((hidden, out_dim)) * np.sqrt(1.0 / hidden)
    x = rng.standard_normal((n, dims))
    y = np.maximum(x @ w1, 0.0) @ w2
    if kind == "regression":
        return Dataset(inputs=x, targets=y, kind="regression")
    return Dataset(inputs=x, targets=y.argmax(axis=1), kind="classification")
